use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::ProjectorError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Beam {
    Parallel,
    Fan,
}

/// Acquisition description. Lengths share one unit (mm by convention),
/// angles are radians.
///
/// Pixel `(i, j)` is centred at `x = (j − (W−1)/2)·ps`, `y = ((H−1)/2 − i)·ps`.
/// At angle θ a parallel ray with detector offset `s` passes through
/// `s·(cos θ, sin θ)` with direction `(−sin θ, cos θ)`. A fan view at β puts
/// the source at `−R_s·(−sin β, cos β)` and the flat detector through
/// `R_d·(−sin β, cos β)`, parallel to `(cos β, sin β)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub beam: Beam,
    #[serde(alias = "num-angles")]
    pub num_angles: usize,
    pub angles: Vec<f64>,
    #[serde(alias = "num-detector-bins")]
    pub num_detector_bins: usize,
    #[serde(alias = "detector-extent")]
    pub detector_extent: f64,
    #[serde(default, alias = "src-to-axis", skip_serializing_if = "Option::is_none")]
    pub src_to_axis: Option<f64>,
    #[serde(default, alias = "axis-to-detector", skip_serializing_if = "Option::is_none")]
    pub axis_to_detector: Option<f64>,
    #[serde(alias = "image-shape")]
    pub image_shape: [usize; 2],
    #[serde(alias = "pixel-size")]
    pub pixel_size: f64,
}

fn uniform_angles(n: usize, span: f64) -> Vec<f64> {
    (0..n).map(|k| k as f64 * span / n as f64).collect()
}

impl Geometry {
    /// Uniform angles over `[0, π)`; the detector spans the image diagonal.
    pub fn parallel(
        image_shape: [usize; 2],
        pixel_size: f64,
        num_angles: usize,
        num_detector_bins: usize,
    ) -> Result<Self, ProjectorError> {
        let [h, w] = image_shape;
        let geom = Self {
            beam: Beam::Parallel,
            num_angles,
            angles: uniform_angles(num_angles, PI),
            num_detector_bins,
            detector_extent: pixel_size * ((h * h + w * w) as f64).sqrt(),
            src_to_axis: None,
            axis_to_detector: None,
            image_shape,
            pixel_size,
        };
        geom.validate()?;
        Ok(geom)
    }

    /// Uniform angles over `[0, 2π)`; the detector covers the magnified
    /// shadow of the image's circumscribed disk.
    pub fn fan(
        image_shape: [usize; 2],
        pixel_size: f64,
        num_angles: usize,
        num_detector_bins: usize,
        src_to_axis: f64,
        axis_to_detector: f64,
    ) -> Result<Self, ProjectorError> {
        let [h, w] = image_shape;
        let r = 0.5 * pixel_size * ((h * h + w * w) as f64).sqrt();
        if !(src_to_axis > r) {
            return Err(ProjectorError::InvalidGeometry(format!(
                "source distance {src_to_axis} must exceed the image half-diagonal {r}"
            )));
        }
        let half = (src_to_axis + axis_to_detector) * (r / src_to_axis).asin().tan();
        let geom = Self {
            beam: Beam::Fan,
            num_angles,
            angles: uniform_angles(num_angles, 2.0 * PI),
            num_detector_bins,
            detector_extent: 2.0 * half,
            src_to_axis: Some(src_to_axis),
            axis_to_detector: Some(axis_to_detector),
            image_shape,
            pixel_size,
        };
        geom.validate()?;
        Ok(geom)
    }

    pub fn validate(&self) -> Result<(), ProjectorError> {
        let bad = |m: String| Err(ProjectorError::InvalidGeometry(m));
        let [h, w] = self.image_shape;
        if h == 0 || w == 0 {
            return bad(format!("image shape {:?} has a zero dimension", self.image_shape));
        }
        if !(self.pixel_size > 0.0 && self.pixel_size.is_finite()) {
            return bad(format!("pixel size {} must be positive", self.pixel_size));
        }
        if self.num_angles == 0 || self.num_detector_bins == 0 {
            return bad("angle and detector bin counts must be positive".into());
        }
        if self.angles.len() != self.num_angles {
            return bad(format!(
                "num_angles is {} but {} angles are listed",
                self.num_angles,
                self.angles.len()
            ));
        }
        if !(self.detector_extent > 0.0 && self.detector_extent.is_finite()) {
            return bad(format!("detector extent {} must be positive", self.detector_extent));
        }
        let span = match self.beam {
            Beam::Parallel => PI,
            Beam::Fan => 2.0 * PI,
        };
        if self.angles.iter().any(|&a| !(0.0..span).contains(&a)) {
            return bad(format!("angles must lie in [0, {span})"));
        }
        if self.angles.windows(2).any(|p| p[1] <= p[0]) {
            return bad("angles must be strictly increasing".into());
        }
        if self.beam == Beam::Fan {
            match (self.src_to_axis, self.axis_to_detector) {
                (Some(a), Some(b)) if a > 0.0 && b > 0.0 => {}
                _ => return bad("fan beam needs positive src_to_axis and axis_to_detector".into()),
            }
        }
        Ok(())
    }

    pub fn bin_spacing(&self) -> f64 {
        self.detector_extent / self.num_detector_bins as f64
    }

    /// Detector coordinate of bin `j`'s centre.
    pub fn bin_center(&self, j: usize) -> f64 {
        (j as f64 - (self.num_detector_bins as f64 - 1.0) / 2.0) * self.bin_spacing()
    }

    pub fn sinogram_shape(&self) -> [usize; 2] {
        [self.num_angles, self.num_detector_bins]
    }

    /// Ray for `(angle, bin)`: start point, unit direction and the parameter
    /// interval that may carry signal (unbounded for parallel beams).
    pub(crate) fn ray(&self, angle: usize, bin: usize) -> ([f64; 2], [f64; 2], [f64; 2]) {
        let th = self.angles[angle];
        let (s, c) = th.sin_cos();
        let u = self.bin_center(bin);
        match self.beam {
            Beam::Parallel => ([u * c, u * s], [-s, c], [f64::NEG_INFINITY, f64::INFINITY]),
            Beam::Fan => {
                let rs = self.src_to_axis.unwrap_or(0.0);
                let rd = self.axis_to_detector.unwrap_or(0.0);
                let src = [rs * s, -rs * c];
                let det = [-rd * s + u * c, rd * c + u * s];
                let d = [det[0] - src[0], det[1] - src[1]];
                let len = d[0].hypot(d[1]);
                (src, [d[0] / len, d[1] / len], [0.0, len])
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("geometry serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ProjectorError> {
        let geom: Self =
            serde_json::from_str(text).map_err(|e| ProjectorError::InvalidGeometry(e.to_string()))?;
        geom.validate()?;
        Ok(geom)
    }
}
