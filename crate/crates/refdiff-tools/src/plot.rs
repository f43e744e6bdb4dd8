//! Guidance-schedule diagnostics: the scale curves as CSV and a line plot.

use std::fs;
use std::path::Path;

use refdiff_core::guidance::schedule_scales;

use crate::error::{Result, ToolError};

/// One row per timestep from `t = steps` down to `t = 0`:
/// `t,omega_ref,omega_prompt`. The first row is `(steps, gamma, 0)` and the
/// last `(0, 0, gamma)` by construction of the schedule.
pub fn schedule_csv(gamma: f64, rho_speed: f64, steps: usize) -> Result<String> {
    validate(gamma, rho_speed, steps)?;
    let mut out = String::from("t,omega_ref,omega_prompt\n");
    for t in (0..=steps).rev() {
        let (w_ref, w_prompt) = schedule_scales(t, steps, gamma, rho_speed);
        out.push_str(&format!("{t},{w_ref},{w_prompt}\n"));
    }
    Ok(out)
}

fn validate(gamma: f64, rho_speed: f64, steps: usize) -> Result<()> {
    if steps == 0 {
        return Err(ToolError::Config("schedule needs at least one step".into()));
    }
    if gamma < 0.0 {
        return Err(ToolError::Config("gamma must be nonnegative".into()));
    }
    if rho_speed <= 0.0 {
        return Err(ToolError::Config("rho_speed must be positive".into()));
    }
    Ok(())
}

const PLOT_W: usize = 480;
const PLOT_H: usize = 320;
const MARGIN: usize = 24;

/// Render both scale curves over remaining time `t` (left edge `t = steps`,
/// right edge `t = 0`, the order sampling visits them).
pub fn schedule_png(path: &Path, gamma: f64, rho_speed: f64, steps: usize) -> Result<()> {
    validate(gamma, rho_speed, steps)?;
    let mut img = image::RgbImage::from_pixel(
        PLOT_W as u32,
        PLOT_H as u32,
        image::Rgb([255, 255, 255]),
    );
    let inner_w = PLOT_W - 2 * MARGIN;
    let inner_h = PLOT_H - 2 * MARGIN;
    let top = gamma.max(1e-12);
    let y_of = |v: f64| {
        let frac = (v / top).clamp(0.0, 1.0);
        MARGIN + ((1.0 - frac) * (inner_h - 1) as f64).round() as usize
    };
    for x in 0..inner_w {
        let px = MARGIN + x;
        img.put_pixel(px as u32, (PLOT_H - MARGIN) as u32, image::Rgb([0, 0, 0]));
    }
    for y in 0..inner_h {
        let py = MARGIN + y;
        img.put_pixel(MARGIN as u32, py as u32, image::Rgb([0, 0, 0]));
    }
    let mut draw = |color: [u8; 3], f: &dyn Fn(f64) -> f64| {
        let mut prev: Option<usize> = None;
        for x in 0..inner_w {
            let t = steps as f64 * (1.0 - x as f64 / (inner_w - 1) as f64);
            let y = y_of(f(t));
            let lo = prev.map_or(y, |p| p.min(y));
            let hi = prev.map_or(y, |p| p.max(y));
            for yy in lo..=hi {
                img.put_pixel((MARGIN + x) as u32, yy as u32, image::Rgb(color));
            }
            prev = Some(y);
        }
    };
    let total = steps as f64;
    draw([31, 119, 180], &|t: f64| gamma * (t / total).powf(rho_speed));
    draw([255, 127, 14], &|t: f64| {
        gamma - gamma * (t / total).powf(rho_speed)
    });
    img.save(path)?;
    Ok(())
}

/// Write both artifacts.
pub fn plot_schedule(
    csv_path: &Path,
    png_path: &Path,
    gamma: f64,
    rho_speed: f64,
    steps: usize,
) -> Result<()> {
    fs::write(csv_path, schedule_csv(gamma, rho_speed, steps)?)?;
    schedule_png(png_path, gamma, rho_speed, steps)
}
