//! FCOS-style location grids, positive-sample assignment and relative
//! coordinate maps.

use crate::datagen::InstanceAnn;

/// Per-level regression ranges for P3, P4, P5 in input pixels.
pub const DEFAULT_SIZE_RANGES: [(f32, f32); 3] = [(0.0, 64.0), (64.0, 128.0), (128.0, f32::INFINITY)];

pub const DEFAULT_STRIDES: [u32; 3] = [8, 16, 32];

/// Feature-grid locations of one pyramid level, mapped to image space.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationGrid {
    pub level: u32,
    pub stride: u32,
    pub height: usize,
    pub width: usize,
    /// Row-major `(x, y)` centers.
    pub centers: Vec<(f32, f32)>,
}

impl LocationGrid {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

pub fn make_locations(h: usize, w: usize, stride: u32) -> LocationGrid {
    let half = (stride / 2) as f32;
    let s = stride as f32;
    let mut centers = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            centers.push((half + j as f32 * s, half + i as f32 * s));
        }
    }
    LocationGrid {
        level: stride.trailing_zeros(),
        stride,
        height: h,
        width: w,
        centers,
    }
}

/// Grids for every default level of an `h x w` input.
pub fn pyramid_grids(h: usize, w: usize) -> Vec<LocationGrid> {
    DEFAULT_STRIDES
        .iter()
        .map(|&s| make_locations(h / s as usize, w / s as usize, s))
        .collect()
}

/// Targets of one level, all row-major over the level's grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelAssignment {
    pub height: usize,
    pub width: usize,
    /// 0 is background, otherwise a category id.
    pub class_target: Vec<u32>,
    /// `(l, t, r, b)` distances in pixels; zeros on background.
    pub box_target: Vec<[f32; 4]>,
    pub centerness_target: Vec<f32>,
    /// -1 on background.
    pub instance_id: Vec<i64>,
}

impl LevelAssignment {
    fn background(height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            class_target: vec![0; n],
            box_target: vec![[0.0; 4]; n],
            centerness_target: vec![0.0; n],
            instance_id: vec![-1; n],
        }
    }

    pub fn len(&self) -> usize {
        self.class_target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_target.is_empty()
    }

    /// Indices of positive locations, ascending.
    pub fn positives(&self) -> Vec<usize> {
        (0..self.len()).filter(|&p| self.instance_id[p] >= 0).collect()
    }

    pub fn positives_of(&self, instance_id: i64) -> Vec<usize> {
        (0..self.len()).filter(|&p| self.instance_id[p] == instance_id).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub levels: Vec<LevelAssignment>,
}

impl Assignment {
    /// N_pos: positive locations over all levels.
    pub fn num_positives(&self) -> usize {
        self.levels
            .iter()
            .map(|l| l.instance_id.iter().filter(|&&i| i >= 0).count())
            .sum()
    }
}

pub fn centerness(ltrb: [f32; 4]) -> f32 {
    let [l, t, r, b] = ltrb;
    ((l.min(r) / l.max(r)) * (t.min(b) / t.max(b))).sqrt()
}

/// Positive iff the location lies strictly inside a visible box and the
/// box's largest regression distance falls in the level's range; ties between
/// boxes go to the smallest area, then the lowest instance id.
pub fn assign_targets(grids: &[LocationGrid], anns: &[InstanceAnn], size_ranges: &[(f32, f32)]) -> Assignment {
    assert_eq!(grids.len(), size_ranges.len(), "one size range per level");
    let boxes: Vec<(&InstanceAnn, crate::geometry::BBox)> =
        anns.iter().filter(|a| a.visible).filter_map(|a| a.bbox.map(|b| (a, b))).collect();

    let levels = grids
        .iter()
        .zip(size_ranges)
        .map(|(grid, &(lo, hi))| {
            let mut level = LevelAssignment::background(grid.height, grid.width);
            for (p, &(x, y)) in grid.centers.iter().enumerate() {
                let mut best: Option<(f32, u32, usize)> = None;
                for (k, (ann, b)) in boxes.iter().enumerate() {
                    let ltrb = [x - b.x1, y - b.y1, b.x2 - x, b.y2 - y];
                    if ltrb.iter().any(|&d| d <= 0.0) {
                        continue;
                    }
                    let m = ltrb.iter().copied().fold(f32::MIN, f32::max);
                    if !(m > lo && m <= hi) {
                        continue;
                    }
                    let key = (b.area(), ann.instance_id, k);
                    let better = match best {
                        None => true,
                        Some((area, id, _)) => key.0 < area || (key.0 == area && key.1 < id),
                    };
                    if better {
                        best = Some(key);
                    }
                }
                if let Some((_, _, k)) = best {
                    let (ann, b) = boxes[k];
                    let ltrb = [x - b.x1, y - b.y1, b.x2 - x, b.y2 - y];
                    level.class_target[p] = ann.category_id;
                    level.box_target[p] = ltrb;
                    level.centerness_target[p] = centerness(ltrb);
                    level.instance_id[p] = i64::from(ann.instance_id);
                }
            }
            level
        })
        .collect();
    Assignment { levels }
}

/// Default multi-level assignment for an `h x w` frame.
pub fn assign_frame(h: usize, w: usize, anns: &[InstanceAnn]) -> Assignment {
    assign_targets(&pyramid_grids(h, w), anns, &DEFAULT_SIZE_RANGES)
}

/// Single-level assignment on the stride-8 grid with an unbounded size range.
/// Kernels, embeddings and mask features all live on this grid.
pub fn assign_fused(h: usize, w: usize, anns: &[InstanceAnn]) -> LevelAssignment {
    let grid = make_locations(h / 8, w / 8, 8);
    let mut a = assign_targets(&[grid], anns, &[(0.0, f32::INFINITY)]);
    a.levels.remove(0)
}

pub fn image_diagonal(h: usize, w: usize) -> f32 {
    ((h * h + w * w) as f32).sqrt()
}

/// `[2 x h x w]` map of `(x' - x, y' - y) / normalizer` over the grid centers.
pub fn relative_coords(center: (f32, f32), grid: &LocationGrid, normalizer: f32) -> Vec<f32> {
    assert!(normalizer > 0.0, "normalizer must be positive");
    let n = grid.len();
    let mut out = vec![0f32; 2 * n];
    for (p, &(gx, gy)) in grid.centers.iter().enumerate() {
        out[p] = (gx - center.0) / normalizer;
        out[n + p] = (gy - center.1) / normalizer;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BBox, Mask};

    fn ann_box(id: u32, cat: u32, b: BBox) -> InstanceAnn {
        let mask = Mask::from_fn(128, 128, |y, x| {
            (x as f32) >= b.x1 && (x as f32) < b.x2 && (y as f32) >= b.y1 && (y as f32) < b.y2
        });
        InstanceAnn::from_mask(id, cat, mask)
    }

    #[test]
    fn grid_formula() {
        assert_eq!(make_locations(1, 1, 8).centers, vec![(4.0, 4.0)]);
        assert_eq!(
            make_locations(2, 2, 16).centers,
            vec![(8.0, 8.0), (24.0, 8.0), (8.0, 24.0), (24.0, 24.0)]
        );
        let g = make_locations(5, 7, 32);
        assert_eq!(g.level, 5);
        for &(x, y) in &g.centers {
            assert!(x > 0.0 && x < 7.0 * 32.0 && y > 0.0 && y < 5.0 * 32.0);
        }
    }

    #[test]
    fn single_box_assignment() {
        let grids = [make_locations(16, 16, 8)];
        let a = ann_box(3, 2, BBox::new(0.0, 0.0, 16.0, 16.0));
        let asg = assign_targets(&grids, &[a], &[(0.0, f32::INFINITY)]);
        let lvl = &asg.levels[0];
        // centers (4,4), (12,4), (4,12), (12,12) are inside
        assert_eq!(lvl.positives(), vec![0, 1, 16, 17]);
        assert_eq!(lvl.class_target[0], 2);
        assert_eq!(lvl.instance_id[17], 3);
        assert_eq!(lvl.box_target[0], [4.0, 4.0, 12.0, 12.0]);
        assert_eq!(asg.num_positives(), 4);
    }

    #[test]
    fn minimal_area_wins() {
        let grids = [make_locations(16, 16, 8)];
        let small = ann_box(2, 1, BBox::new(0.0, 0.0, 10.0, 10.0));
        let big = ann_box(1, 3, BBox::new(0.0, 0.0, 20.0, 20.0));
        let asg = assign_targets(&grids, &[big.clone(), small.clone()], &[(0.0, f32::INFINITY)]);
        assert_eq!(asg.levels[0].instance_id[0], 2);
        assert_eq!(asg.levels[0].class_target[0], 1);
        assert_eq!(asg.levels[0].instance_id[1], 1, "(12,4) only inside the big box");
        let swapped = assign_targets(&grids, &[small, big], &[(0.0, f32::INFINITY)]);
        assert_eq!(asg, swapped);
    }

    #[test]
    fn equal_area_goes_to_lowest_id() {
        let grids = [make_locations(16, 16, 8)];
        let a = ann_box(7, 1, BBox::new(0.0, 0.0, 16.0, 16.0));
        let b = ann_box(4, 2, BBox::new(0.0, 0.0, 16.0, 16.0));
        let asg = assign_targets(&grids, &[a, b], &[(0.0, f32::INFINITY)]);
        assert_eq!(asg.levels[0].instance_id[0], 4);
    }

    #[test]
    fn size_ranges_route_levels() {
        let grids = pyramid_grids(128, 128);
        let big = ann_box(1, 1, BBox::new(0.0, 0.0, 120.0, 120.0));
        let asg = assign_targets(&grids, &[big], &DEFAULT_SIZE_RANGES);
        // location (4,4) in P3 has max distance 116 -> out of (0,64]
        assert_eq!(asg.levels[0].instance_id[0], -1);
        assert!(!asg.levels[1].positives().is_empty());
    }

    #[test]
    fn centerness_is_one_at_center() {
        assert_eq!(centerness([5.0, 3.0, 5.0, 3.0]), 1.0);
        assert!(centerness([1.0, 3.0, 5.0, 3.0]) < 1.0);
    }

    #[test]
    fn empty_annotations_are_background() {
        let asg = assign_frame(64, 64, &[]);
        assert_eq!(asg.num_positives(), 0);
        assert_eq!(asg.levels.len(), 3);
    }

    #[test]
    fn relative_coordinate_properties() {
        let g = make_locations(4, 6, 8);
        let m = relative_coords((12.0, 20.0), &g, 10.0);
        let n = g.len();
        let p = 2 * 6 + 1; // center (12, 20)
        assert_eq!((m[p], m[n + p]), (0.0, 0.0));
        let m2 = relative_coords((-12.0, -20.0), &make_locations(4, 6, 8), 10.0);
        let zero = relative_coords((0.0, 0.0), &g, 10.0);
        for i in 0..2 * n {
            // map(x) = base - x/normalizer, so map(x) + map(-x) = 2 base
            assert!((m[i] + m2[i] - 2.0 * zero[i]).abs() < 1e-6);
        }
    }

    proptest::proptest! {
        #[test]
        fn positives_lie_inside_their_box(boxes in proptest::collection::vec((0u8..120, 0u8..120, 2u8..100, 2u8..100), 0..6)) {
            let anns: Vec<InstanceAnn> = boxes
                .iter()
                .enumerate()
                .map(|(i, &(x, y, w, h))| {
                    let (x, y) = (f32::from(x), f32::from(y));
                    ann_box(i as u32 + 1, 1, BBox::new(x, y, (x + f32::from(w)).min(128.0), (y + f32::from(h)).min(128.0)))
                })
                .collect();
            let a = assign_frame(128, 128, &anns);
            let grids = pyramid_grids(128, 128);
            for (level, grid) in a.levels.iter().zip(&grids) {
                for p in level.positives() {
                    let ann = anns.iter().find(|x| i64::from(x.instance_id) == level.instance_id[p]).unwrap();
                    let b = ann.bbox.unwrap();
                    let (x, y) = grid.centers[p];
                    proptest::prop_assert!(x > b.x1 && x < b.x2 && y > b.y1 && y < b.y2);
                    proptest::prop_assert!(level.box_target[p].iter().all(|&d| d > 0.0));
                    let c = level.centerness_target[p];
                    proptest::prop_assert!(c > 0.0 && c <= 1.0);
                }
            }
        }
    }
}
