pub mod obj;
pub mod pfm;
pub mod ply;
pub mod png_io;
