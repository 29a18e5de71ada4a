use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Full-range RGB <-> YCbCr matrices. Chroma is offset by 128.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColorMatrix {
    #[default]
    Bt709,
    Bt601,
}

impl FromStr for ColorMatrix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "bt709" | "709" => Ok(ColorMatrix::Bt709),
            "bt601" | "601" => Ok(ColorMatrix::Bt601),
            _ => Err(Error::Config(format!("unknown color matrix '{s}' (expected bt709 or bt601)"))),
        }
    }
}

impl ColorMatrix {
    /// Luma weights (kr, kb); kg = 1 - kr - kb.
    fn weights(self) -> (f64, f64) {
        match self {
            ColorMatrix::Bt709 => (0.2126, 0.0722),
            ColorMatrix::Bt601 => (0.299, 0.114),
        }
    }

    pub fn to_ycbcr(self, r: f64, g: f64, b: f64) -> (f64, f64, f64) {
        let (kr, kb) = self.weights();
        let kg = 1.0 - kr - kb;
        let y = kr * r + kg * g + kb * b;
        let cb = (b - y) / (2.0 * (1.0 - kb)) + 128.0;
        let cr = (r - y) / (2.0 * (1.0 - kr)) + 128.0;
        (clamp8(y), clamp8(cb), clamp8(cr))
    }

    pub fn to_rgb(self, y: f64, cb: f64, cr: f64) -> (f64, f64, f64) {
        let (kr, kb) = self.weights();
        let kg = 1.0 - kr - kb;
        let r = y + 2.0 * (1.0 - kr) * (cr - 128.0);
        let b = y + 2.0 * (1.0 - kb) * (cb - 128.0);
        let g = (y - kr * r - kb * b) / kg;
        (clamp8(r), clamp8(g), clamp8(b))
    }
}

fn clamp8(v: f64) -> f64 {
    v.clamp(0.0, 255.0)
}

/// BT.709 full-range forward transform.
pub fn rgb_to_ycbcr(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    ColorMatrix::Bt709.to_ycbcr(r, g, b)
}

/// BT.709 full-range inverse transform.
pub fn ycbcr_to_rgb(y: f64, cb: f64, cr: f64) -> (f64, f64, f64) {
    ColorMatrix::Bt709.to_rgb(y, cb, cr)
}
