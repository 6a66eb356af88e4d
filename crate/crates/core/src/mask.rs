use crate::error::{Error, Result};

/// Boolean attackable region over an image's spatial grid, shared by all
/// channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    cells: Vec<bool>,
    count: usize,
}

impl Mask {
    pub fn new(height: usize, width: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != height * width {
            return Err(Error::shape(format!(
                "mask of {height}×{width} needs {} cells, got {}",
                height * width,
                cells.len()
            )));
        }
        let count = cells.iter().filter(|&&c| c).count();
        Ok(Self {
            height,
            width,
            cells,
            count,
        })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cells: vec![true; height * width],
            count: height * width,
        }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cells: vec![false; height * width],
            count: 0,
        }
    }

    /// Axis-aligned rectangle with top-left corner `(top, left)`.
    pub fn rect(height: usize, width: usize, top: usize, left: usize, rect_h: usize, rect_w: usize) -> Result<Self> {
        if top + rect_h > height || left + rect_w > width {
            return Err(Error::Bounds(format!(
                "{rect_h}×{rect_w} rectangle at ({top}, {left}) leaves the {height}×{width} grid"
            )));
        }
        let mut m = Self::empty(height, width);
        for y in top..top + rect_h {
            m.cells[y * width + left..y * width + left + rect_w].fill(true);
        }
        m.count = rect_h * rect_w;
        Ok(m)
    }

    /// Procedural eyeglass frame: two rectangular rims joined by a bridge,
    /// scaled to the image.
    pub fn eyeglass_frame(height: usize, width: usize) -> Self {
        let mut m = Self::empty(height, width);
        let t = (height / 16).max(1);
        let (top, bottom) = (height * 3 / 10, height / 2);
        let mut set = |y: usize, x: usize| {
            if y < height && x < width {
                m.cells[y * width + x] = true;
            }
        };
        for (left, right) in [(width * 3 / 20, width * 9 / 20), (width * 11 / 20, width * 17 / 20)] {
            for y in top..=bottom {
                for x in left..=right {
                    let edge = y < top + t || y + t > bottom || x < left + t || x + t > right;
                    if edge {
                        set(y, x);
                    }
                }
            }
        }
        for y in top..top + t {
            for x in width * 9 / 20..=width * 11 / 20 {
                set(y, x);
            }
        }
        m.count = m.cells.iter().filter(|&&c| c).count();
        m
    }

    /// Two horizontal bars above and below the centre, like tape strips on a
    /// road sign.
    pub fn sticker_bars(height: usize, width: usize) -> Self {
        let mut m = Self::empty(height, width);
        let bar = (height / 10).max(1);
        for top in [height / 4, height * 13 / 20] {
            for y in top..(top + bar).min(height) {
                for x in width / 4..width * 3 / 4 {
                    m.cells[y * width + x] = true;
                }
            }
        }
        m.count = m.cells.iter().filter(|&&c| c).count();
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of attackable cells.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.cells[y * self.width + x]
    }

    /// Fails unless the mask covers exactly an `height × width` image.
    pub fn check_spatial(&self, height: usize, width: usize) -> Result<()> {
        if (self.height, self.width) != (height, width) {
            return Err(Error::shape(format!(
                "mask is {}×{}, image is {height}×{width}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Flat indices of attackable elements in a `[channels, H, W]` image.
    pub fn element_indices(&self, channels: usize) -> Vec<usize> {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(self.count * channels);
        for c in 0..channels {
            out.extend(
                self.cells
                    .iter()
                    .enumerate()
                    .filter(|(_, &on)| on)
                    .map(|(i, _)| c * plane + i),
            );
        }
        out
    }
}
