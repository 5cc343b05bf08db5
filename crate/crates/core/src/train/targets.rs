use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::model::{ModelConfig, NUM_ANCHORS, STRIDES};

/// One prediction slot that receives a regression target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetEntry {
    pub image: usize,
    pub anchor: usize,
    pub grid_y: usize,
    pub grid_x: usize,
    /// Box centre relative to the cell's top-left corner, in grid units.
    pub offset: [f64; 2],
    /// Box size in grid units.
    pub size: [f64; 2],
    /// Anchor size in grid units.
    pub anchor_size: [f64; 2],
    pub class_id: u32,
}

impl TargetEntry {
    fn area(&self) -> f64 {
        self.size[0] * self.size[1]
    }

    fn cell(&self) -> (usize, usize, usize, usize) {
        (self.image, self.anchor, self.grid_y, self.grid_x)
    }

    /// Cell order, larger boxes first within a cell, then by geometry so
    /// the order does not depend on the input order of ground truth.
    fn canonical(a: &Self, b: &Self) -> Ordering {
        a.cell()
            .cmp(&b.cell())
            .then(b.area().total_cmp(&a.area()))
            .then(a.class_id.cmp(&b.class_id))
            .then(a.offset[0].total_cmp(&b.offset[0]))
            .then(a.offset[1].total_cmp(&b.offset[1]))
            .then(a.size[0].total_cmp(&b.size[0]))
            .then(a.size[1].total_cmp(&b.size[1]))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScaleTargets {
    pub grid: usize,
    pub entries: Vec<TargetEntry>,
}

impl ScaleTargets {
    /// Whether entry `i` is the first (largest-box) entry of its cell, which
    /// defines that cell's objectness target.
    pub fn owns_cell(&self, i: usize) -> bool {
        i == 0 || self.entries[i - 1].cell() != self.entries[i].cell()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AssignedTargets {
    pub batch: usize,
    pub scales: Vec<ScaleTargets>,
}

impl AssignedTargets {
    pub fn len(&self) -> usize {
        self.scales.iter().map(|s| s.entries.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Whether a box of size `wh` matches an anchor under the ratio rule.
pub fn anchor_matches(wh: [f64; 2], anchor: [f64; 2], ratio_threshold: f64) -> bool {
    let r = |a: f64, b: f64| (a / b).max(b / a);
    r(wh[0], anchor[0]).max(r(wh[1], anchor[1])) < ratio_threshold
}

/// Assign ground truth boxes (input-canvas pixels, one list per image) to
/// prediction slots: every anchor passing the ratio rule takes the box at
/// its centre cell plus the nearer horizontal and vertical neighbour cells.
pub fn assign_targets(gt: &[Vec<BBox>], cfg: &ModelConfig, ratio_threshold: f64) -> AssignedTargets {
    let mut scales = Vec::with_capacity(STRIDES.len());
    for (si, &stride) in STRIDES.iter().enumerate() {
        let g = cfg.input_size / stride;
        let s = stride as f64;
        let mut entries = Vec::new();
        for (image, boxes) in gt.iter().enumerate() {
            for b in boxes.iter().filter(|b| b.is_valid()) {
                let (cx, cy) = b.center();
                let (x, y) = (cx / s, cy / s);
                let size = [b.width() / s, b.height() / s];
                let (gi, gj) = (cell_of(x, g), cell_of(y, g));
                let mut cells = vec![(gi, gj)];
                cells.extend(neighbour(x, g).map(|n| (n, gj)));
                cells.extend(neighbour(y, g).map(|n| (gi, n)));
                for a in 0..NUM_ANCHORS {
                    let anchor = cfg.anchors[si][a];
                    if !anchor_matches([b.width(), b.height()], anchor, ratio_threshold) {
                        continue;
                    }
                    for &(cx_i, cy_j) in &cells {
                        entries.push(TargetEntry {
                            image,
                            anchor: a,
                            grid_y: cy_j,
                            grid_x: cx_i,
                            offset: [x - cx_i as f64, y - cy_j as f64],
                            size,
                            anchor_size: [anchor[0] / s, anchor[1] / s],
                            class_id: b.class_id,
                        });
                    }
                }
            }
        }
        entries.sort_by(TargetEntry::canonical);
        scales.push(ScaleTargets { grid: g, entries });
    }
    AssignedTargets { batch: gt.len(), scales }
}

fn cell_of(x: f64, g: usize) -> usize {
    (x.floor().max(0.0) as usize).min(g - 1)
}

/// The nearer adjacent cell along one axis: the lower one when the centre
/// sits in the lower half of its cell (ties included), else the upper one,
/// provided the centre is more than one cell away from that border.
fn neighbour(x: f64, g: usize) -> Option<usize> {
    let cell = cell_of(x, g);
    let frac = x - cell as f64;
    if frac <= 0.5 {
        (x > 1.0).then(|| cell - 1)
    } else {
        (g as f64 - x > 1.0).then_some(cell + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig::tiny()
    }

    #[test]
    fn anchor_sized_box_at_cell_centre_gets_two_neighbours() {
        let cfg = cfg();
        let [aw, ah] = cfg.anchors[1][0];
        // cell (5, 6) centre at stride 16
        let b = BBox::from_center(5.5 * 16.0, 6.5 * 16.0, aw, ah);
        let t = assign_targets(&[vec![b]], &cfg, 4.0);
        let cells: Vec<(usize, usize)> =
            t.scales[1].entries.iter().filter(|e| e.anchor == 0).map(|e| (e.grid_x, e.grid_y)).collect();
        assert_eq!(cells, [(5, 5), (4, 6), (5, 6)]);
    }

    #[test]
    fn oversized_box_unassigned() {
        let cfg = cfg();
        let largest = cfg.anchors[2][2];
        let huge = BBox::from_center(128.0, 128.0, 10.0 * largest[0], 10.0 * largest[1]);
        assert!(assign_targets(&[vec![huge]], &cfg, 4.0).is_empty());
    }

    #[test]
    fn empty_ground_truth() {
        let t = assign_targets(&[vec![], vec![]], &cfg(), 4.0);
        assert_eq!(t.batch, 2);
        assert!(t.is_empty());
    }

    #[test]
    fn border_box_has_no_outward_neighbour() {
        let cfg = cfg();
        let [aw, ah] = cfg.anchors[0][0];
        let b = BBox::from_center(4.0, 4.0, aw, ah);
        let t = assign_targets(&[vec![b]], &cfg, 4.0);
        let e: Vec<_> = t.scales[0].entries.iter().filter(|e| e.anchor == 0).collect();
        assert_eq!(e.len(), 1);
        assert_eq!((e[0].grid_x, e[0].grid_y), (0, 0));
    }
}
