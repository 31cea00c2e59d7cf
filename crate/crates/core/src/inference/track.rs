use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Mask};
use crate::inference::decode::{box_iou, Detection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    #[default]
    Greedy,
    Hungarian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssocParams {
    pub w_iou: f64,
    pub w_cls: f64,
    /// Detections whose best affinity is below this start new tracks.
    pub new_thresh: f64,
    /// Weight of the stored embedding when updating; 0 replaces it.
    pub momentum: f64,
    pub matcher: Matcher,
}

impl Default for AssocParams {
    fn default() -> Self {
        Self {
            w_iou: 0.5,
            w_cls: 0.5,
            new_thresh: 0.5,
            momentum: 0.0,
            matcher: Matcher::Greedy,
        }
    }
}

impl AssocParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_iou >= 0.0 && self.w_cls >= 0.0 && self.new_thresh.is_finite()) {
            return Err(Error::Config("w_iou and w_cls must be nonnegative, new_thresh finite".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub track_id: u64,
    pub embedding: Vec<f32>,
    pub last_box: BBox,
    pub category: u32,
    pub category_votes: BTreeMap<u32, usize>,
    pub last_seen_frame: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MemoryBank {
    pub entries: Vec<BankEntry>,
    next_id: u64,
}

impl MemoryBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn spawn(&mut self, det: &Detection, frame: usize) -> u64 {
        let track_id = self.next_id;
        self.next_id += 1;
        self.entries.push(BankEntry {
            track_id,
            embedding: det.embedding.clone(),
            last_box: det.bbox,
            category: det.category,
            category_votes: BTreeMap::from([(det.category, 1)]),
            last_seen_frame: frame,
        });
        track_id
    }

    fn update(&mut self, entry: usize, det: &Detection, frame: usize, momentum: f64) {
        let e = &mut self.entries[entry];
        let m = momentum as f32;
        for (s, &d) in e.embedding.iter_mut().zip(&det.embedding) {
            *s = m * *s + (1.0 - m) * d;
        }
        e.last_box = det.bbox;
        e.category = det.category;
        *e.category_votes.entry(det.category).or_default() += 1;
        e.last_seen_frame = frame;
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

fn softmax_inplace(xs: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in xs.iter_mut() {
        *x /= s;
    }
}

/// `[dets x entries]` average of the row softmax (each detection over bank
/// entries) and column softmax (each entry over detections) of dot products.
pub fn bisoftmax(sim: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = sim.len();
    let m = sim.first().map_or(0, Vec::len);
    let mut rows: Vec<Vec<f64>> = sim.to_vec();
    for r in &mut rows {
        softmax_inplace(r);
    }
    let mut cols = vec![vec![0.0; n]; m];
    for (j, col) in cols.iter_mut().enumerate() {
        for (i, v) in col.iter_mut().enumerate() {
            *v = sim[i][j];
        }
        softmax_inplace(col);
    }
    (0..n).map(|i| (0..m).map(|j| 0.5 * (rows[i][j] + cols[j][i])).collect()).collect()
}

/// Affinity of every detection to every bank entry.
pub fn affinity_matrix(dets: &[Detection], bank: &MemoryBank, params: &AssocParams) -> Vec<Vec<f64>> {
    let sim: Vec<Vec<f64>> = dets
        .iter()
        .map(|d| bank.entries.iter().map(|e| dot(&d.embedding, &e.embedding)).collect())
        .collect();
    let mut aff = bisoftmax(&sim);
    for (i, d) in dets.iter().enumerate() {
        for (j, e) in bank.entries.iter().enumerate() {
            aff[i][j] += params.w_iou * f64::from(box_iou(&d.bbox, &e.last_box)) + params.w_cls * f64::from(u8::from(d.category == e.category));
        }
    }
    aff
}

/// Greedy one-to-one matching by descending affinity, stopping below `thresh`.
/// Ties go to the lower detection index, then the lower entry index.
pub fn greedy_match(aff: &[Vec<f64>], thresh: f64) -> Vec<Option<usize>> {
    let n = aff.len();
    let m = aff.first().map_or(0, Vec::len);
    let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..m).map(move |j| (i, j))).collect();
    pairs.sort_by(|&(a, b), &(c, d)| aff[c][d].total_cmp(&aff[a][b]).then((a, b).cmp(&(c, d))));
    let mut det_to = vec![None; n];
    let mut used = vec![false; m];
    for (i, j) in pairs {
        if aff[i][j] < thresh {
            break;
        }
        if det_to[i].is_none() && !used[j] {
            det_to[i] = Some(j);
            used[j] = true;
        }
    }
    det_to
}

/// Maximum-weight one-to-one matching over pairs with affinity at least
/// `thresh` (Kuhn-Munkres on a padded square cost matrix).
pub fn hungarian_match(aff: &[Vec<f64>], thresh: f64) -> Vec<Option<usize>> {
    let n = aff.len();
    let m = aff.first().map_or(0, Vec::len);
    let size = n.max(m);
    if size == 0 {
        return vec![None; n];
    }
    let big = aff.iter().flatten().copied().fold(0.0, f64::max);
    let cost = |i: usize, j: usize| if i < n && j < m && aff[i][j] >= thresh { big - aff[i][j] } else { big };
    // potentials and matching, 1-based with a sentinel column 0
    let inf = f64::INFINITY;
    let mut u = vec![0.0; size + 1];
    let mut v = vec![0.0; size + 1];
    let mut p = vec![0usize; size + 1];
    let mut way = vec![0usize; size + 1];
    for i in 1..=size {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; size + 1];
        let mut used = vec![false; size + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=size {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=size {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut det_to = vec![None; n];
    for j in 1..=size {
        let i = p[j];
        if i >= 1 && i <= n && j <= m && aff[i - 1][j - 1] >= thresh {
            det_to[i - 1] = Some(j - 1);
        }
    }
    det_to
}

/// Matches detections to the bank, updates matched entries and spawns new
/// tracks for the rest. Returns the track id of every detection.
pub fn associate(dets: &[Detection], bank: &mut MemoryBank, params: &AssocParams, frame: usize) -> Vec<u64> {
    let matches = if bank.is_empty() {
        vec![None; dets.len()]
    } else {
        let aff = affinity_matrix(dets, bank, params);
        match params.matcher {
            Matcher::Greedy => greedy_match(&aff, params.new_thresh),
            Matcher::Hungarian => hungarian_match(&aff, params.new_thresh),
        }
    };
    dets.iter()
        .zip(matches)
        .map(|(d, m)| match m {
            Some(j) => {
                bank.update(j, d, frame, params.momentum);
                bank.entries[j].track_id
            }
            None => bank.spawn(d, frame),
        })
        .collect()
}

/// A finished instance track.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackPrediction {
    pub track_id: u64,
    pub category: u32,
    pub score: f64,
    /// One entry per frame, `None` where the track is absent.
    pub masks: Vec<Option<Mask>>,
}

/// One detection assigned to a track.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackObservation {
    pub frame: usize,
    pub category: u32,
    pub score: f32,
    pub mask: Mask,
}

/// Modal category; ties go to the higher mean score, then the lower id.
pub fn majority_category(obs: &[(u32, f32)]) -> Option<u32> {
    let mut stats: BTreeMap<u32, (usize, f64)> = BTreeMap::new();
    for &(c, s) in obs {
        let e = stats.entry(c).or_default();
        e.0 += 1;
        e.1 += f64::from(s);
    }
    let mut best: Option<(u32, usize, f64)> = None;
    for (&c, &(n, sum)) in &stats {
        let mean = sum / n as f64;
        let better = match best {
            None => true,
            Some((_, bn, bm)) => n > bn || (n == bn && mean > bm),
        };
        if better {
            best = Some((c, n, mean));
        }
    }
    best.map(|b| b.0)
}

pub fn finalize_tracks(tracks: &BTreeMap<u64, Vec<TrackObservation>>, length: usize) -> Vec<TrackPrediction> {
    tracks
        .iter()
        .filter(|(_, obs)| !obs.is_empty())
        .map(|(&track_id, obs)| {
            let votes: Vec<(u32, f32)> = obs.iter().map(|o| (o.category, o.score)).collect();
            let mut masks = vec![None; length];
            for o in obs {
                if o.frame < length {
                    masks[o.frame] = Some(o.mask.clone());
                }
            }
            TrackPrediction {
                track_id,
                category: majority_category(&votes).expect("nonempty track"),
                score: obs.iter().map(|o| f64::from(o.score)).sum::<f64>() / obs.len() as f64,
                masks,
            }
        })
        .collect()
}

/// Online tracker for one video.
#[derive(Debug, Clone, Default)]
pub struct VideoTracker {
    pub params: AssocParams,
    pub bank: MemoryBank,
    frame: usize,
    observations: BTreeMap<u64, Vec<TrackObservation>>,
}

impl VideoTracker {
    pub fn new(params: AssocParams) -> Self {
        Self {
            params,
            ..Self::default()
        }
    }

    pub fn frames_seen(&self) -> usize {
        self.frame
    }

    /// Associates one frame's detections; returns their track ids.
    pub fn push(&mut self, dets: &[Detection]) -> Vec<u64> {
        let ids = associate(dets, &mut self.bank, &self.params, self.frame);
        for (d, &id) in dets.iter().zip(&ids) {
            self.observations.entry(id).or_default().push(TrackObservation {
                frame: self.frame,
                category: d.category,
                score: d.score,
                mask: d.mask.clone(),
            });
        }
        self.frame += 1;
        ids
    }

    pub fn finish(&self) -> Vec<TrackPrediction> {
        finalize_tracks(&self.observations, self.frame)
    }
}
