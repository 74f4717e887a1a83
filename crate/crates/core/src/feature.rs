use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::ops;

const STRIDES: [usize; 6] = [1, 2, 4, 8, 16, 32];

/// Dense (batch, channels, height, width) activation with its stride
/// relative to the input image.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub data: Tensor,
    pub stride: usize,
}

impl FeatureMap {
    pub fn new(data: Tensor, stride: usize) -> Result<Self> {
        let (n, c, h, w) = data
            .dims4()
            .map_err(|_| Error::Shape(format!("feature map must be rank 4, got {:?}", data.dims())))?;
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("empty feature map {:?}", data.dims())));
        }
        if !STRIDES.contains(&stride) {
            return Err(Error::Shape(format!("unsupported stride {stride}")));
        }
        Ok(Self { data, stride })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.data.dims4().expect("validated rank 4")
    }

    pub fn channels(&self) -> usize {
        self.dims().1
    }

    pub fn hw(&self) -> (usize, usize) {
        let (_, _, h, w) = self.dims();
        (h, w)
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        ops::ensure_finite(&self.data, what)
    }
}

/// Backbone outputs at strides 4/8/16/32 plus the fused slots the neck fills in.
#[derive(Clone, Debug)]
pub struct PyramidFeatures {
    pub s2: FeatureMap,
    pub s3: FeatureMap,
    pub s4: FeatureMap,
    pub s5: FeatureMap,
    pub s23: Option<FeatureMap>,
    pub s45: Option<FeatureMap>,
    pub s2345: Option<FeatureMap>,
}

impl PyramidFeatures {
    pub fn new(s2: FeatureMap, s3: FeatureMap, s4: FeatureMap, s5: FeatureMap) -> Result<Self> {
        let p = Self {
            s2,
            s3,
            s4,
            s5,
            s23: None,
            s45: None,
            s2345: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn levels(&self) -> [&FeatureMap; 4] {
        [&self.s2, &self.s3, &self.s4, &self.s5]
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.levels();
        for (i, (f, want)) in levels.iter().zip([4, 8, 16, 32]).enumerate() {
            if f.stride != want {
                return Err(Error::Shape(format!("S{} has stride {}, expected {want}", i + 2, f.stride)));
            }
        }
        for pair in levels.windows(2) {
            let (h0, w0) = pair[0].hw();
            let (h1, w1) = pair[1].hw();
            if h0 != 2 * h1 || w0 != 2 * w1 {
                return Err(Error::Shape(format!(
                    "spatial dims must halve between levels: {h0}x{w0} -> {h1}x{w1}"
                )));
            }
        }
        Ok(())
    }
}
