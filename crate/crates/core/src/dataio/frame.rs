use crate::error::{Error, Result};

/// One supervised time step.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSample {
    pub name: String,
    pub width: usize,
    pub height: usize,
    /// H×W×3
    pub color: Vec<u8>,
    /// H×W, 0 marks invalid depth
    pub depth: Vec<f32>,
    pub feature_dim: usize,
    /// H×W×d compressed features; empty until the codec has run
    pub features: Vec<f32>,
    /// H×W region ids, 0 = unlabeled
    pub labels: Vec<u16>,
    /// Normalized to [0, 1] over the sequence.
    pub timestamp: f64,
    /// Index into the dataset's camera list.
    pub camera: usize,
}

impl FrameSample {
    pub fn blank(name: &str, width: usize, height: usize, feature_dim: usize) -> Self {
        let n = width * height;
        Self {
            name: name.to_string(),
            width,
            height,
            color: vec![0; n * 3],
            depth: vec![0.0; n],
            feature_dim,
            features: vec![0.0; n * feature_dim],
            labels: vec![0; n],
            timestamp: 0.0,
            camera: 0,
        }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn has_features(&self) -> bool {
        self.feature_dim > 0 && self.features.len() == self.pixels() * self.feature_dim
    }

    pub fn check_camera(&self, width: usize, height: usize) -> Result<()> {
        if (self.width, self.height) != (width, height) {
            return Err(Error::ShapeMismatch {
                context: format!("frame {}", self.name),
                detail: format!("frame is {}x{}, camera is {width}x{height}", self.width, self.height),
            });
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.pixels();
        let mismatch = |what: &str, found: usize, expected: usize| Error::ShapeMismatch {
            context: format!("frame {}", self.name),
            detail: format!("{what} has {found} values, expected {expected}"),
        };
        if self.color.len() != 3 * n {
            return Err(mismatch("color", self.color.len(), 3 * n));
        }
        if self.depth.len() != n {
            return Err(mismatch("depth", self.depth.len(), n));
        }
        if self.labels.len() != n {
            return Err(mismatch("labels", self.labels.len(), n));
        }
        if !self.features.is_empty() && self.features.len() != n * self.feature_dim {
            return Err(mismatch("features", self.features.len(), n * self.feature_dim));
        }
        if !(0.0..=1.0).contains(&self.timestamp) {
            return Err(Error::invalid(format!(
                "frame {} timestamp {} outside [0, 1]",
                self.name, self.timestamp
            )));
        }
        Ok(())
    }
}
