use serde::{Deserialize, Serialize};

use super::Result;
use crate::field::{field_stats, strain_magnitude, velocity_from_vorticity, FlowState, GridSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptorKind {
    Vortex,
    StagnationPoint,
    ShearLine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologicalDescriptor {
    pub kind: DescriptorKind,
    pub row: usize,
    pub col: usize,
    pub x: f64,
    pub y: f64,
    /// |core vorticity| for vortices, speed for stagnation points, peak
    /// strain rate for shear lines.
    pub magnitude: f64,
    /// Rotation sense of vortices; zero otherwise.
    pub sign: i8,
    /// Number of ridge cells for shear lines, one otherwise.
    pub extent: usize,
}

/// Detection thresholds relative to field statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Vortex cores need `|omega|` above this many standard deviations.
    pub vorticity_sigmas: f64,
    /// Stagnation points need speed below this fraction of the maximum.
    pub speed_fraction: f64,
    /// Shear ridges need strain above this many standard deviations.
    pub strain_sigmas: f64,
    /// Ridge components shorter than this are ignored.
    pub min_shear_cells: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            vorticity_sigmas: 2.0,
            speed_fraction: 0.05,
            strain_sigmas: 2.0,
            min_shear_cells: 3,
        }
    }
}

fn wrap(i: usize, d: isize, n: usize) -> usize {
    (i as isize + d).rem_euclid(n as isize) as usize
}

fn neighbours(g: &GridSpec, i: usize, j: usize) -> impl Iterator<Item = usize> + '_ {
    let (h, w) = (g.height, g.width);
    (-1isize..=1)
        .flat_map(move |di| (-1isize..=1).map(move |dj| (di, dj)))
        .filter(|&(di, dj)| di != 0 || dj != 0)
        .map(move |(di, dj)| wrap(i, di, h) * w + wrap(j, dj, w))
}

fn strict_extrema(g: &GridSpec, values: &[f64], maxima: bool) -> Vec<usize> {
    let mut out = Vec::new();
    for i in 0..g.height {
        for j in 0..g.width {
            let c = values[i * g.width + j];
            let ok = neighbours(g, i, j).all(|k| if maxima { c > values[k] } else { c < values[k] });
            if ok {
                out.push(i * g.width + j);
            }
        }
    }
    out
}

fn descriptor(g: &GridSpec, kind: DescriptorKind, idx: usize, magnitude: f64, sign: i8, extent: usize) -> TopologicalDescriptor {
    let (row, col) = (idx / g.width, idx % g.width);
    TopologicalDescriptor {
        kind,
        row,
        col,
        x: g.x(col),
        y: g.y(row),
        magnitude,
        sign,
        extent,
    }
}

/// Vortex cores, stagnation points and shear lines of `x`, ordered by
/// magnitude (descending) then row and column.
///
/// Vortices are strict local maxima of `|omega|` over the 8-neighbourhood.
/// Stagnation points are strict local speed minima that are not vortex cores.
/// Shear lines are periodic 8-connected components of strain-rate ridge cells
/// (local maxima along x or y); each is reported at its strongest cell.
pub fn extract_topology(x: &FlowState, th: &Thresholds) -> Result<Vec<TopologicalDescriptor>> {
    let g = x.grid;
    let omega = x.vorticity_field()?;
    omega.ensure_finite()?;
    let vel = match x.velocity() {
        Some(v) => v,
        None => velocity_from_vorticity(&omega)?,
    };
    vel.ensure_finite()?;
    let mut out = Vec::new();

    let abs_w: Vec<f64> = omega.values().iter().map(|v| v.abs()).collect();
    let theta_w = th.vorticity_sigmas * field_stats(&omega).std;
    let mut cores = vec![false; g.len()];
    for k in strict_extrema(&g, &abs_w, true) {
        if abs_w[k] > theta_w {
            cores[k] = true;
            let sign = if omega.values()[k] > 0.0 { 1 } else { -1 };
            out.push(descriptor(&g, DescriptorKind::Vortex, k, abs_w[k], sign, 1));
        }
    }

    let speed = vel.speed();
    let theta_u = th.speed_fraction * speed.max_abs();
    for k in strict_extrema(&g, speed.values(), false) {
        if speed.values()[k] < theta_u && !cores[k] {
            out.push(descriptor(&g, DescriptorKind::StagnationPoint, k, speed.values()[k], 0, 1));
        }
    }

    let strain = strain_magnitude(&vel)?;
    let s = strain.values();
    let theta_s = th.strain_sigmas * field_stats(&strain).std;
    let (h, w) = (g.height, g.width);
    let ridge: Vec<bool> = (0..g.len())
        .map(|k| {
            let (i, j) = (k / w, k % w);
            let c = s[k];
            let along_x = c >= s[i * w + wrap(j, -1, w)] && c >= s[i * w + wrap(j, 1, w)];
            let along_y = c >= s[wrap(i, -1, h) * w + j] && c >= s[wrap(i, 1, h) * w + j];
            c > theta_s && (along_x || along_y)
        })
        .collect();
    let mut seen = vec![false; g.len()];
    for start in 0..g.len() {
        if !ridge[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let (mut count, mut best) = (0, start);
        while let Some(k) = stack.pop() {
            count += 1;
            if s[k] > s[best] || (s[k] == s[best] && k < best) {
                best = k;
            }
            for n in neighbours(&g, k / w, k % w) {
                if ridge[n] && !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            }
        }
        if count >= th.min_shear_cells {
            out.push(descriptor(&g, DescriptorKind::ShearLine, best, s[best], 0, count));
        }
    }

    out.sort_by(|a, b| {
        b.magnitude
            .total_cmp(&a.magnitude)
            .then(a.row.cmp(&b.row))
            .then(a.col.cmp(&b.col))
            .then(a.kind.cmp(&b.kind))
    });
    Ok(out)
}

/// One line per descriptor in physical coordinates, all numbers at four
/// decimals.
pub fn render_descriptors(list: &[TopologicalDescriptor]) -> String {
    if list.is_empty() {
        return "no salient structures detected".to_string();
    }
    list.iter()
        .map(|d| match d.kind {
            DescriptorKind::Vortex => format!(
                "{} vortex at (x={:.4}, y={:.4}), core vorticity {:.4}",
                if d.sign > 0 { "cyclonic" } else { "anticyclonic" },
                d.x,
                d.y,
                d.magnitude * d.sign as f64
            ),
            DescriptorKind::StagnationPoint => format!(
                "stagnation point at (x={:.4}, y={:.4}), speed {:.4}",
                d.x, d.y, d.magnitude
            ),
            DescriptorKind::ShearLine => format!(
                "shear line through (x={:.4}, y={:.4}), peak strain rate {:.4}",
                d.x, d.y, d.magnitude
            ),
        })
        .collect::<Vec<_>>()
        .join("\n")
}
