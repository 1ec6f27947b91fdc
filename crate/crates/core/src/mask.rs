use crate::error::{Error, Result};

/// Integer label grid, `n × h × w`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMask {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if n == 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!("mask dims must be positive, got {n}x{h}x{w}")));
        }
        if data.len() != n * h * w {
            return Err(Error::shape(format!(
                "mask buffer of length {} does not fill {n}x{h}x{w}",
                data.len()
            )));
        }
        Ok(Self { n, h, w, data })
    }

    pub fn filled(n: usize, h: usize, w: usize, label: u8) -> Self {
        Self {
            n,
            h,
            w,
            data: vec![label; n * h * w],
        }
    }

    pub fn get(&self, n: usize, y: usize, x: usize) -> u8 {
        self.data[(n * self.h + y) * self.w + x]
    }

    pub fn image(&self, n: usize) -> &[u8] {
        let len = self.h * self.w;
        &self.data[n * len..(n + 1) * len]
    }

    pub fn stack(parts: &[&LabelMask]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("stack needs at least one mask"))?;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if (p.h, p.w) != (first.h, first.w) {
                return Err(Error::shape("stacked masks differ in size"));
            }
            n += p.n;
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            n,
            h: first.h,
            w: first.w,
            data,
        })
    }

    /// Checks every label is `< num_classes` or equals `ignore`.
    pub fn check_labels(&self, num_classes: usize, ignore: Option<u8>) -> Result<()> {
        match self
            .data
            .iter()
            .position(|&l| (l as usize) >= num_classes && Some(l) != ignore)
        {
            Some(i) => Err(Error::data(format!(
                "label {} at index {i} outside 0..{num_classes}",
                self.data[i]
            ))),
            None => Ok(()),
        }
    }
}
