//! PSNR/SSIM of de-rained frames and of the rainy input against the
//! scene background.

use rspu_core::data::{denormalize, normalize, Image, TimeLapseScene};
use rspu_core::metrics::{psnr, ssim, Psnr};
use rspu_core::model::DerainModel;

use crate::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneMetrics {
    pub scene_id: String,
    pub frames: usize,
    pub psnr_in: Psnr,
    pub ssim_in: f64,
    pub psnr_out: Psnr,
    pub ssim_out: f64,
}

impl SceneMetrics {
    /// `psnr_out - psnr_in` when both are finite.
    pub fn delta_psnr(&self) -> Option<f64> {
        Some(self.psnr_out.finite()? - self.psnr_in.finite()?)
    }
}

/// Mean of finite values; any infinite entry makes the mean infinite.
pub fn mean_psnr(values: &[Psnr]) -> Psnr {
    let mut sum = 0.0;
    for v in values {
        match v {
            Psnr::Finite(db) => sum += db,
            Psnr::Infinite => return Psnr::Infinite,
        }
    }
    Psnr::Finite(sum / values.len().max(1) as f64)
}

pub fn derain_image(model: &DerainModel, img: &Image) -> CliResult<(Image, Image)> {
    let cfg = model.config();
    let want = [cfg.height, cfg.width, 3];
    if img.shape() != want {
        return Err(CliError::Data(format!(
            "input is {:?} (H, W, C) but the model expects {:?}",
            img.shape(),
            want
        )));
    }
    let (y, r) = model.infer(&normalize(img)?)?;
    Ok((denormalize(&y)?, Image::from_tensor(&r)?))
}

pub fn evaluate_scene(model: &DerainModel, scene: &TimeLapseScene) -> CliResult<SceneMetrics> {
    let (mut pin, mut pout) = (Vec::new(), Vec::new());
    let (mut sin, mut sout) = (0.0, 0.0);
    for frame in &scene.frames {
        let (clean, _) = derain_image(model, frame)?;
        pin.push(psnr(frame, &scene.background)?);
        pout.push(psnr(&clean, &scene.background)?);
        sin += ssim(frame, &scene.background)?;
        sout += ssim(&clean, &scene.background)?;
    }
    let n = scene.frames.len().max(1) as f64;
    Ok(SceneMetrics {
        scene_id: scene.scene_id.clone(),
        frames: scene.frames.len(),
        psnr_in: mean_psnr(&pin),
        ssim_in: sin / n,
        psnr_out: mean_psnr(&pout),
        ssim_out: sout / n,
    })
}

/// Per-scene rows followed by a `mean` row over scenes.
pub fn evaluate(model: &DerainModel, scenes: &[TimeLapseScene]) -> CliResult<Vec<SceneMetrics>> {
    let mut rows = scenes.iter().map(|s| evaluate_scene(model, s)).collect::<CliResult<Vec<_>>>()?;
    let n = rows.len().max(1) as f64;
    let mean = SceneMetrics {
        scene_id: "mean".into(),
        frames: rows.iter().map(|r| r.frames).sum(),
        psnr_in: mean_psnr(&rows.iter().map(|r| r.psnr_in).collect::<Vec<_>>()),
        ssim_in: rows.iter().map(|r| r.ssim_in).sum::<f64>() / n,
        psnr_out: mean_psnr(&rows.iter().map(|r| r.psnr_out).collect::<Vec<_>>()),
        ssim_out: rows.iter().map(|r| r.ssim_out).sum::<f64>() / n,
    };
    rows.push(mean);
    Ok(rows)
}

pub const TABLE_HEADER: &str = "scene\tframes\tpsnr_in\tssim_in\tpsnr_out\tssim_out\tdelta_psnr";

pub fn table_row(m: &SceneMetrics) -> String {
    let delta = m.delta_psnr().map_or_else(|| "nan".to_string(), |d| format!("{d:.4}"));
    format!(
        "{}\t{}\t{}\t{:.6}\t{}\t{:.6}\t{}",
        m.scene_id, m.frames, m.psnr_in, m.ssim_in, m.psnr_out, m.ssim_out, delta
    )
}

/// Affine min-max map of a rain estimate onto `[0, 1]`; a constant map
/// becomes all zeros. Returns the image and the `(min, max)` used.
pub fn rain_visualization(rain: &Image) -> (Image, f64, f64) {
    let lo = rain.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = rain.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = rain.clone();
    let span = hi - lo;
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v = if span > 0.0 { (*v - lo) / span } else { 0.0 });
    (out, lo, hi)
}
