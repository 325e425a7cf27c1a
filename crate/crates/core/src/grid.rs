use alloc::vec;
use alloc::vec::Vec;

/// Row-major 2D buffer indexed by `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn new(width: usize, height: usize, fill: T) -> Self {
        Grid {
            width,
            height,
            data: vec![fill; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Option<Self> {
        (data.len() == width * height).then_some(Grid { width, height, data })
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }
    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }
    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<T> {
        self.data
    }
    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }
    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }
}

pub type Mask = Grid<bool>;

impl Grid<f64> {
    /// Block-average downsampling by an integer factor (trailing partial
    /// blocks are dropped).
    pub fn downsample_mean(&self, factor: usize) -> Grid<f64> {
        if factor <= 1 {
            return self.clone();
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let mut out = Grid::new(w, h, 0.0);
        let norm = 1.0 / (factor * factor) as f64;
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += self.get(x * factor + dx, y * factor + dy);
                    }
                }
                out.set(x, y, acc * norm);
            }
        }
        out
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }

    /// Area-average downsampling re-binarized at 0.5.
    pub fn downsample_binary(&self, factor: usize) -> Mask {
        if factor <= 1 {
            return self.clone();
        }
        self.map(|b| if *b { 1.0 } else { 0.0 }).downsample_mean(factor).map(|v| *v >= 0.5)
    }

    /// Erosion by a `size x size` square; neighbors outside the image are
    /// ignored.
    pub fn erode(&self, size: usize) -> Mask {
        self.square_filter(size, true)
    }

    /// Dilation by a `size x size` square; neighbors outside the image are
    /// ignored.
    pub fn dilate(&self, size: usize) -> Mask {
        self.square_filter(size, false)
    }

    pub fn opening(&self, size: usize) -> Mask {
        self.erode(size).dilate(size)
    }

    // Separable min (erode) or max (dilate) filter.
    fn square_filter(&self, size: usize, all: bool) -> Mask {
        if size <= 1 {
            return self.clone();
        }
        let r = (size / 2) as isize;
        let (w, h) = (self.width as isize, self.height as isize);
        let pass = |src: &Mask, dx: isize, dy: isize| -> Mask {
            let mut out = Mask::new(src.width, src.height, false);
            for y in 0..h {
                for x in 0..w {
                    let mut acc = all;
                    for o in -r..=r {
                        let (xx, yy) = (x + o * dx, y + o * dy);
                        if xx < 0 || yy < 0 || xx >= w || yy >= h {
                            continue;
                        }
                        let v = *src.get(xx as usize, yy as usize);
                        if all && !v {
                            acc = false;
                            break;
                        }
                        if !all && v {
                            acc = true;
                            break;
                        }
                    }
                    out.set(x as usize, y as usize, acc);
                }
            }
            out
        };
        pass(&pass(self, 1, 0), 0, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_binary_thresholds_at_half() {
        let mut m = Mask::new(4, 2, false);
        m.set(0, 0, true);
        m.set(1, 0, true);
        m.set(2, 0, true);
        let d = m.downsample_binary(2);
        assert_eq!((d.width(), d.height()), (2, 1));
        assert!(*d.get(0, 0));
        assert!(!*d.get(1, 0));
    }

    #[test]
    fn erosion_examples() {
        let mut line = Mask::new(12, 12, false);
        for x in 2..10 {
            line.set(x, 5, true);
        }
        assert_eq!(line.erode(3).count(), 0);

        let mut block = Mask::new(20, 20, false);
        for y in 5..15 {
            for x in 5..15 {
                block.set(x, y, true);
            }
        }
        let e = block.erode(3);
        assert_eq!(e.count(), 64);
        assert!(*e.get(6, 6) && !*e.get(5, 5));
        assert_eq!(e.dilate(3), block);
    }
}
