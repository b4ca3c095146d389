//! Run directory layout and the manifest written by every command.
//!
//! Per-step fields are `step_NNNN_<channel>.bin` with a `.json` header next to
//! them; plots are `<name>.png`. Paths in the manifest are relative to the run
//! directory and sorted.

use std::path::{Path, PathBuf};

use flowlens::field::{write_field, ScalarField};
use image::{Rgb, RgbImage};
use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

pub struct RunDir {
    root: PathBuf,
    outputs: Vec<String>,
    inputs: Vec<String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config: &'a RunConfig,
    config_hash: String,
    seeds: &'a [u64],
    inputs: &'a [String],
    outputs: &'a [String],
    status: &'a str,
    exit_code: i32,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            outputs: Vec::new(),
            inputs: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn add_input(&mut self, p: &Path) {
        self.inputs.push(p.display().to_string());
    }

    fn path_for(&mut self, rel: &str) -> Result<PathBuf, CliError> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        self.outputs.push(rel.to_string());
        Ok(p)
    }

    /// Lists a file some other writer put under the run directory.
    pub fn record(&mut self, rel: &str) {
        self.outputs.push(rel.to_string());
    }

    pub fn text(&mut self, rel: &str, body: &str) -> Result<(), CliError> {
        let p = self.path_for(rel)?;
        std::fs::write(&p, body).map_err(|e| io_err(&p, e))
    }

    pub fn json<T: Serialize>(&mut self, rel: &str, v: &T) -> Result<(), CliError> {
        let body = serde_json::to_string_pretty(v).map_err(|e| CliError::Runtime(e.to_string()))? + "\n";
        self.text(rel, &body)
    }

    /// `<dir>/step_NNNN_<channel>.bin` plus its header.
    pub fn field(&mut self, dir: &str, step: usize, f: &ScalarField) -> Result<(), CliError> {
        let rel = format!("{dir}/step_{step:04}_{}.bin", f.name());
        let p = self.path_for(&rel)?;
        self.outputs.push(rel.replace(".bin", ".json"));
        write_field(&p, f).map_err(|e| io_err(&p, e))
    }

    pub fn png(&mut self, rel: &str, f: &ScalarField, diverging: bool) -> Result<(), CliError> {
        let p = self.path_for(rel)?;
        render_png(f, diverging).save(&p).map_err(|e| io_err(&p, e))
    }

    /// Writes `manifest.json` and returns its path.
    pub fn finish(
        mut self,
        command: &str,
        cfg: &RunConfig,
        seeds: &[u64],
        status: &str,
        exit_code: i32,
    ) -> Result<PathBuf, CliError> {
        self.outputs.sort();
        self.outputs.dedup();
        let m = Manifest {
            tool: "flowlens",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config: cfg,
            config_hash: format!("sha256:{}", cfg.hash()),
            seeds,
            inputs: &self.inputs,
            outputs: &self.outputs,
            status,
            exit_code,
        };
        let p = self.root.join("manifest.json");
        let body = serde_json::to_string_pretty(&m).map_err(|e| CliError::Runtime(e.to_string()))? + "\n";
        std::fs::write(&p, body).map_err(|e| io_err(&p, e))?;
        Ok(p)
    }
}

/// Blue-white-red around zero for signed fields, black to white otherwise.
/// Row 0 of the field is the bottom of the image.
pub fn render_png(f: &ScalarField, diverging: bool) -> RgbImage {
    let (h, w) = (f.grid.height, f.grid.width);
    let finite = f.values().iter().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let m = lo.abs().max(hi.abs());
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = f.at(h - 1 - y as usize, x as usize);
        if !v.is_finite() {
            return Rgb([0, 255, 0]);
        }
        if diverging {
            let t = if m > 0.0 { (v / m).clamp(-1.0, 1.0) } else { 0.0 };
            let fade = |c: f64| (255.0 * (1.0 - c)).round() as u8;
            if t >= 0.0 {
                Rgb([255, fade(t), fade(t)])
            } else {
                Rgb([fade(-t), fade(-t), 255])
            }
        } else {
            let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
            let g = (255.0 * t).round() as u8;
            Rgb([g, g, g])
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use flowlens::field::{GridSpec, Variable};

    #[test]
    fn diverging_map_is_white_at_zero() {
        let g = GridSpec::square(8).unwrap();
        let f = ScalarField::from_fn(g, Variable::new("vorticity", "1/s"), |x, _| x.sin());
        let img = render_png(&f, true);
        assert_eq!(img.dimensions(), (8, 8));
        // Column 0 has x = 0.
        assert_eq!(img.get_pixel(0, 0), &Rgb([255, 255, 255]));
        assert_eq!(img.get_pixel(2, 0), &Rgb([255, 0, 0]));
        assert_eq!(img.get_pixel(6, 0), &Rgb([0, 0, 255]));
    }
}
