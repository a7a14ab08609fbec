//! Activation maps as PGM images and channel vectors as CSV.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::tape::Tape;
use crate::numerics::tensor::Tensor;

use super::model::{stack_images, ToyModel};
use super::scene::ToyScene;

/// Binary greyscale PGM of a `[H, W]` map in `[0, 1]`, pixel `round(255 v)`.
pub fn pgm(map: &[f64], h: usize, w: usize) -> Result<Vec<u8>> {
    if map.len() != h * w {
        return Err(Error::shape("pgm", h * w, map.len()));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.iter().map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8));
    Ok(out)
}

/// One FBCA site's intermediates for a single image.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteDump {
    pub site: String,
    /// `[H, W]` foreground map.
    pub f_map_fore: Tensor,
    pub c_fore: Vec<f64>,
    pub c_back: Option<Vec<f64>>,
    pub d_w: Vec<f64>,
}

/// Eval-mode forward of one scene; returns every FBCA site in call order.
pub fn dump_sites(model: &ToyModel, scene: &ToyScene) -> Result<Vec<SiteDump>> {
    let mut tape = Tape::new();
    let x = tape.constant(stack_images(&[scene])?);
    model.forward(&mut tape, x, false)?;
    let mut out: Vec<SiteDump> = Vec::new();
    for p in tape.probes() {
        if out.last().map_or(true, |d| d.site != p.site) {
            out.push(SiteDump {
                site: p.site.clone(),
                f_map_fore: Tensor::zeros(&[0, 0]),
                c_fore: Vec::new(),
                c_back: None,
                d_w: Vec::new(),
            });
        }
        let d = out.last_mut().expect("just pushed");
        let v = tape.value(p.var);
        match p.field {
            "f_map_fore" => {
                let s = v.shape();
                d.f_map_fore = v.reshaped(&s[2..])?;
            }
            "c_fore" => d.c_fore = v.data().to_vec(),
            "c_back" => d.c_back = Some(v.data().to_vec()),
            "d_w" => d.d_w = v.data().to_vec(),
            _ => {}
        }
    }
    Ok(out)
}

/// `block_id,channel,c_fore,c_back,d_w`; `c_back` is NaN without a background path.
pub fn channel_csv(sites: &[SiteDump]) -> String {
    let mut s = String::from("block_id,channel,c_fore,c_back,d_w\n");
    for d in sites {
        for (c, (&cf, &dw)) in d.c_fore.iter().zip(&d.d_w).enumerate() {
            let cb = d.c_back.as_ref().map_or(f64::NAN, |b| b[c]);
            let _ = writeln!(s, "{},{},{},{},{}", d.site, c, cf, cb, dw);
        }
    }
    s
}
