//! Synapse position histories: CSV export/import and an SVG scatter plot.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::acu::SynapsePositions;
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "layer,synapse,iter,alpha,beta";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub layer: usize,
    pub synapse: usize,
    pub iter: usize,
    pub alpha: f64,
    pub beta: f64,
}

/// Per-layer, per-synapse time series of offsets. Layers are ACU layers in
/// network order; with groups, synapse `g·K + k` is synapse `k` of group `g`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PositionTrajectory {
    points: Vec<TrajectoryPoint>,
}

impl PositionTrajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn points(&self) -> &[TrajectoryPoint] {
        &self.points
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn last_iter(&self) -> Option<usize> {
        self.points.last().map(|p| p.iter)
    }

    /// Appends a snapshot of every layer's positions at `iter`, which must
    /// be later than every recorded iteration.
    pub fn record(&mut self, iter: usize, layers: &[Vec<SynapsePositions>]) -> Result<()> {
        if self.last_iter().is_some_and(|last| iter <= last) {
            return Err(Error::InvalidConfig(format!(
                "trajectory iteration {iter} is not after {}",
                self.last_iter().unwrap_or(0)
            )));
        }
        for (layer, groups) in layers.iter().enumerate() {
            let mut synapse = 0;
            for set in groups {
                for p in set.points() {
                    self.points.push(TrajectoryPoint {
                        layer,
                        synapse,
                        iter,
                        alpha: p.alpha,
                        beta: p.beta,
                    });
                    synapse += 1;
                }
            }
        }
        Ok(())
    }

    pub fn layer_count(&self) -> usize {
        self.points.iter().map(|p| p.layer + 1).max().unwrap_or(0)
    }

    /// Points at the first and at the last recorded iteration, per layer.
    fn endpoints(&self, first: bool) -> BTreeMap<usize, Vec<(f64, f64)>> {
        let iter = if first {
            self.points.first().map(|p| p.iter)
        } else {
            self.last_iter()
        };
        let mut out: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
        for p in self.points.iter().filter(|p| Some(p.iter) == iter) {
            out.entry(p.layer).or_default().push((p.alpha, p.beta));
        }
        out
    }

    /// Final offsets per layer.
    pub fn final_positions(&self) -> BTreeMap<usize, Vec<(f64, f64)>> {
        self.endpoints(false)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(32 * (self.points.len() + 1));
        s.push_str(CSV_HEADER);
        s.push('\n');
        for p in &self.points {
            let _ = writeln!(s, "{},{},{},{},{}", p.layer, p.synapse, p.iter, p.alpha, p.beta);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(CSV_HEADER) {
            return Err(Error::InvalidConfig(format!("trajectory CSV must start with {CSV_HEADER}")));
        }
        let mut points = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || Error::InvalidConfig(format!("trajectory CSV line {}: {line:?}", i + 2));
            if f.len() != 5 {
                return Err(bad());
            }
            let point = TrajectoryPoint {
                layer: f[0].parse().map_err(|_| bad())?,
                synapse: f[1].parse().map_err(|_| bad())?,
                iter: f[2].parse().map_err(|_| bad())?,
                alpha: f[3].parse().map_err(|_| bad())?,
                beta: f[4].parse().map_err(|_| bad())?,
            };
            if points.last().is_some_and(|q: &TrajectoryPoint| q.iter > point.iter) {
                return Err(bad());
            }
            points.push(point);
        }
        Ok(Self { points })
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }

    /// Flattens to rows of `(layer, synapse, iter, alpha, beta)`.
    pub fn to_rows(&self) -> Vec<[f64; 5]> {
        self.points
            .iter()
            .map(|p| [p.layer as f64, p.synapse as f64, p.iter as f64, p.alpha, p.beta])
            .collect()
    }

    pub fn from_rows(rows: &[[f64; 5]]) -> Self {
        Self {
            points: rows
                .iter()
                .map(|r| TrajectoryPoint {
                    layer: r[0] as usize,
                    synapse: r[1] as usize,
                    iter: r[2] as usize,
                    alpha: r[3],
                    beta: r[4],
                })
                .collect(),
        }
    }

    /// One panel per layer: the reference 3×3 grid as grey crosses, each
    /// synapse's path as a thin line and its final offset as a dot. The
    /// vertical axis is alpha (height), the horizontal axis beta (width).
    pub fn to_svg(&self) -> String {
        const PANEL: f64 = 220.0;
        const MARGIN: f64 = 20.0;
        let finals = self.final_positions();
        let layers: Vec<usize> = finals.keys().copied().collect();
        let extent = self
            .points
            .iter()
            .map(|p| p.alpha.abs().max(p.beta.abs()))
            .fold(1.5f64, f64::max)
            .ceil()
            + 0.5;
        let scale = (PANEL / 2.0 - MARGIN) / extent;
        let width = PANEL * layers.len().max(1) as f64;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{h}" viewBox="0 0 {width} {h}">"#,
            h = PANEL + 20.0
        );
        let mut paths: BTreeMap<(usize, usize), Vec<(f64, f64)>> = BTreeMap::new();
        for p in &self.points {
            paths.entry((p.layer, p.synapse)).or_default().push((p.alpha, p.beta));
        }
        for (panel, layer) in layers.iter().enumerate() {
            let cx = panel as f64 * PANEL + PANEL / 2.0;
            let cy = PANEL / 2.0 + 20.0;
            let px = |b: f64| cx + b * scale;
            let py = |a: f64| cy + a * scale;
            let _ = writeln!(
                s,
                r#"<g id="layer{layer}"><text x="{:.2}" y="14" font-size="12" text-anchor="middle">layer {layer}</text>"#,
                cx
            );
            let _ = writeln!(
                s,
                r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#ccc"/>"##,
                cx - PANEL / 2.0 + 4.0,
                cy - PANEL / 2.0 + 4.0,
                PANEL - 8.0,
                PANEL - 8.0
            );
            for a in -1..=1 {
                for b in -1..=1 {
                    let (x, y) = (px(b as f64), py(a as f64));
                    let _ = writeln!(
                        s,
                        r##"<path d="M{:.2} {:.2}L{:.2} {:.2}M{:.2} {:.2}L{:.2} {:.2}" stroke="#999"/>"##,
                        x - 4.0,
                        y - 4.0,
                        x + 4.0,
                        y + 4.0,
                        x - 4.0,
                        y + 4.0,
                        x + 4.0,
                        y - 4.0
                    );
                }
            }
            for ((l, _), path) in paths.range((*layer, 0)..(*layer + 1, 0)) {
                debug_assert_eq!(l, layer);
                if path.len() > 1 {
                    let pts: Vec<String> = path
                        .iter()
                        .map(|(a, b)| format!("{:.2},{:.2}", px(*b), py(*a)))
                        .collect();
                    let _ = writeln!(
                        s,
                        r##"<polyline points="{}" fill="none" stroke="#69c" stroke-width="0.8"/>"##,
                        pts.join(" ")
                    );
                }
            }
            for (a, b) in &finals[layer] {
                let _ = writeln!(
                    s,
                    r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#c33"/>"##,
                    px(*b),
                    py(*a)
                );
            }
            s.push_str("</g>\n");
        }
        s.push_str("</svg>\n");
        s
    }
}
