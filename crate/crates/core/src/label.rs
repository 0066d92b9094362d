use crate::error::{Error, Result};

/// Reserved label value excluded from every loss and metric.
pub const IGNORE: u8 = 255;

/// A batch of 2-D class-index grids, stored row-major as `batch × height × width`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    batch: usize,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(batch: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != batch * height * width {
            return Err(Error::Shape {
                op: "LabelMap::new",
                lhs: vec![batch, height, width],
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            batch,
            height,
            width,
            data,
        })
    }

    pub fn filled(batch: usize, height: usize, width: usize, value: u8) -> Self {
        Self {
            batch,
            height,
            width,
            data: vec![value; batch * height * width],
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, b: usize, r: usize, c: usize) -> u8 {
        self.data[(b * self.height + r) * self.width + c]
    }

    pub fn set(&mut self, b: usize, r: usize, c: usize, v: u8) {
        self.data[(b * self.height + r) * self.width + c] = v;
    }

    /// The `b`-th grid as a single-element batch.
    pub fn sample(&self, b: usize) -> LabelMap {
        let n = self.plane();
        LabelMap {
            batch: 1,
            height: self.height,
            width: self.width,
            data: self.data[b * n..(b + 1) * n].to_vec(),
        }
    }

    /// Stacks single grids (or batches) of equal spatial size along the batch axis.
    pub fn stack(maps: &[LabelMap]) -> Result<LabelMap> {
        let first = maps
            .first()
            .ok_or_else(|| Error::Contract("cannot stack zero label maps".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(maps.iter().map(|m| m.data.len()).sum());
        let mut batch = 0;
        for m in maps {
            if (m.height, m.width) != (h, w) {
                return Err(Error::Shape {
                    op: "LabelMap::stack",
                    lhs: vec![h, w],
                    rhs: vec![m.height, m.width],
                });
            }
            data.extend_from_slice(&m.data);
            batch += m.batch;
        }
        Ok(LabelMap {
            batch,
            height: h,
            width: w,
            data,
        })
    }

    /// Sorted distinct non-ignore values.
    pub fn classes_present(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..255u8).filter(|&v| seen[v as usize]).collect()
    }

    /// Fails with [`Error::InvalidLabel`] if any value is neither `< classes` nor ignore.
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self
            .data
            .iter()
            .position(|&v| v != IGNORE && v as usize >= classes)
        {
            Some(index) => Err(Error::InvalidLabel {
                label: self.data[index],
                index,
                classes,
            }),
            None => Ok(()),
        }
    }
}
