//! Tracking-by-detection baseline: a constant-velocity Kalman filter per
//! track, IoU cost, Hungarian association, and age-based pruning.
//!
//! The state is (cx, cy, area, aspect, vcx, vcy, varea) in normalized
//! units with constant aspect ratio, following the classic online
//! realtime-tracking formulation. It consumes anonymous detections (for
//! example the corrupted ground truth from the synthetic world) so
//! comparisons against the learned tracker are like-for-like.

use crate::assign::hungarian;
use crate::geom::{iou, BBox};

const DIM: usize = 7;
const OBS: usize = 4;

type Mat = Vec<Vec<f64>>;

fn zeros(r: usize, c: usize) -> Mat {
    vec![vec![0.0; c]; r]
}

fn eye(n: usize) -> Mat {
    let mut m = zeros(n, n);
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

fn mat_mul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = zeros(n, m);
    for i in 0..n {
        for kk in 0..k {
            let av = a[i][kk];
            if av == 0.0 {
                continue;
            }
            for j in 0..m {
                out[i][j] += av * b[kk][j];
            }
        }
    }
    out
}

fn mat_t(a: &Mat) -> Mat {
    let (n, m) = (a.len(), a[0].len());
    let mut out = zeros(m, n);
    for i in 0..n {
        for j in 0..m {
            out[j][i] = a[i][j];
        }
    }
    out
}

fn mat_add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + y).collect())
        .collect()
}

fn mat_sub(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x - y).collect())
        .collect()
}

/// Gauss-Jordan inverse with partial pivoting. Panics on a singular
/// matrix; the innovation covariance is positive definite by construction
/// here.
fn mat_inv(a: &Mat) -> Mat {
    let n = a.len();
    let mut aug: Mat = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| aug[i][col].abs().partial_cmp(&aug[j][col].abs()).unwrap())
            .unwrap();
        assert!(aug[pivot][col].abs() > 1e-300, "singular matrix");
        aug.swap(col, pivot);
        let p = aug[col][col];
        for v in &mut aug[col] {
            *v /= p;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let f = aug[row][col];
            if f == 0.0 {
                continue;
            }
            for j in 0..2 * n {
                aug[row][j] -= f * aug[col][j];
            }
        }
    }
    aug.into_iter().map(|row| row[n..].to_vec()).collect()
}

fn symmetrize(p: &mut Mat) {
    let n = p.len();
    for i in 0..n {
        for j in i + 1..n {
            let v = (p[i][j] + p[j][i]) / 2.0;
            p[i][j] = v;
            p[j][i] = v;
        }
    }
}

/// Noise configuration for the filter, in normalized units.
#[derive(Debug, Clone, Copy)]
pub struct KfNoise {
    /// Measurement variance on (cx, cy); area/aspect get 10x.
    pub measurement_var: f64,
    /// Process variance on the observed components; velocity components
    /// get the usual down-scaled values.
    pub process_var: f64,
}

impl Default for KfNoise {
    fn default() -> Self {
        KfNoise {
            measurement_var: 1e-4,
            process_var: 1e-6,
        }
    }
}

/// Constant-velocity Kalman state over (cx, cy, area, aspect).
#[derive(Debug, Clone)]
pub struct KfState {
    pub x: Vec<f64>,
    pub p: Mat,
    q: Mat,
    r: Mat,
}

fn transition() -> Mat {
    let mut f = eye(DIM);
    f[0][4] = 1.0;
    f[1][5] = 1.0;
    f[2][6] = 1.0;
    f
}

fn observation() -> Mat {
    let mut h = zeros(OBS, DIM);
    for (i, row) in h.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    h
}

impl KfState {
    /// Initialize from a detection with unknown (high-variance) velocity.
    pub fn from_box(b: &BBox, noise: &KfNoise) -> Self {
        let (z0, z1, z2, z3) = box_to_obs(b);
        let x = vec![z0, z1, z2, z3, 0.0, 0.0, 0.0];
        let mut p = eye(DIM);
        let mv = noise.measurement_var;
        for (i, scale) in [10.0 * mv, 10.0 * mv, 10.0 * mv, 10.0 * mv, 0.25, 0.25, 0.01]
            .iter()
            .enumerate()
        {
            p[i][i] = *scale;
        }
        let mut q = eye(DIM);
        let pv = noise.process_var;
        for (i, scale) in [pv, pv, pv, pv, 0.01 * pv, 0.01 * pv, 1e-4 * pv]
            .iter()
            .enumerate()
        {
            q[i][i] = *scale;
        }
        let mut r = eye(OBS);
        for (i, scale) in [mv, mv, 10.0 * mv, 10.0 * mv].iter().enumerate() {
            r[i][i] = *scale;
        }
        KfState { x, p, q, r }
    }

    pub fn bbox(&self) -> BBox {
        obs_to_box(self.x[0], self.x[1], self.x[2], self.x[3])
    }
}

fn box_to_obs(b: &BBox) -> (f64, f64, f64, f64) {
    let area = b.w * b.h;
    let aspect = if b.h > 0.0 { b.w / b.h } else { 0.0 };
    (b.cx, b.cy, area, aspect)
}

fn obs_to_box(cx: f64, cy: f64, area: f64, aspect: f64) -> BBox {
    let area = area.max(0.0);
    let aspect = aspect.max(1e-9);
    let w = (area * aspect).sqrt();
    let h = if w > 0.0 { area / w } else { 0.0 };
    BBox::new(cx, cy, w, h)
}

/// Standard linear predict: advance by the constant-velocity transition
/// and inflate the covariance by the process noise.
pub fn kf_predict(state: &mut KfState) {
    let f = transition();
    let mut x_new = vec![0.0; DIM];
    for (i, row) in f.iter().enumerate() {
        x_new[i] = row.iter().zip(&state.x).map(|(a, b)| a * b).sum();
    }
    state.x = x_new;
    let fp = mat_mul(&f, &state.p);
    let mut p = mat_add(&mat_mul(&fp, &mat_t(&f)), &state.q);
    symmetrize(&mut p);
    state.p = p;
}

/// Measurement update in Joseph form, which keeps the covariance
/// symmetric positive semidefinite.
pub fn kf_update(state: &mut KfState, z: &BBox) {
    let h = observation();
    let (z0, z1, z2, z3) = box_to_obs(z);
    let zv = [z0, z1, z2, z3];

    let ph_t = mat_mul(&state.p, &mat_t(&h));
    let s = mat_add(&mat_mul(&h, &ph_t), &state.r);
    let k = mat_mul(&ph_t, &mat_inv(&s));

    let hx: Vec<f64> = h
        .iter()
        .map(|row| row.iter().zip(&state.x).map(|(a, b)| a * b).sum())
        .collect();
    for i in 0..DIM {
        for j in 0..OBS {
            state.x[i] += k[i][j] * (zv[j] - hx[j]);
        }
    }

    let ikh = mat_sub(&eye(DIM), &mat_mul(&k, &h));
    let mut p = mat_add(
        &mat_mul(&mat_mul(&ikh, &state.p), &mat_t(&ikh)),
        &mat_mul(&mat_mul(&k, &state.r), &mat_t(&k)),
    );
    symmetrize(&mut p);
    state.p = p;
}

#[derive(Debug, Clone, Copy)]
pub struct SortConfig {
    /// Minimum IoU to accept an association.
    pub iou_threshold: f64,
    /// Frames a track survives without a matched detection.
    pub max_age: usize,
    /// Consecutive hits before a track is reported.
    pub min_hits: usize,
    pub noise: KfNoise,
}

impl Default for SortConfig {
    fn default() -> Self {
        SortConfig {
            iou_threshold: 0.3,
            max_age: 3,
            min_hits: 1,
            noise: KfNoise::default(),
        }
    }
}

#[derive(Debug)]
struct KfTrack {
    id: u64,
    kf: KfState,
    time_since_update: usize,
    hits: usize,
}

/// One tracker instance per sequence.
#[derive(Debug, Default)]
pub struct SortTracker {
    tracks: Vec<KfTrack>,
    next_id: u64,
}

impl SortTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn track_count(&self) -> usize {
        self.tracks.len()
    }

    /// Advance one frame: predict every track, associate detections by
    /// IoU through the Hungarian solver (rejecting matches below the
    /// threshold), update matched filters, spawn tracks for unmatched
    /// detections, and age out stale tracks. Returns the reported
    /// (id, box) detections for this frame.
    pub fn step(&mut self, detections: &[BBox], cfg: &SortConfig) -> Vec<(u64, BBox)> {
        for t in &mut self.tracks {
            kf_predict(&mut t.kf);
            t.time_since_update += 1;
        }

        const FORBIDDEN: f64 = 1e9;
        let mut det_matched = vec![false; detections.len()];
        if !self.tracks.is_empty() && !detections.is_empty() {
            let cols = detections.len() + self.tracks.len();
            let cost: Vec<Vec<f64>> = self
                .tracks
                .iter()
                .map(|t| {
                    let tb = t.kf.bbox();
                    let mut row: Vec<f64> = detections
                        .iter()
                        .map(|d| {
                            let overlap = iou(&tb, d);
                            if overlap >= cfg.iou_threshold {
                                1.0 - overlap
                            } else {
                                FORBIDDEN
                            }
                        })
                        .collect();
                    row.resize(cols, FORBIDDEN);
                    row
                })
                .collect();
            let assignment = hungarian(&cost).expect("finite padded matrix");
            for (row, col) in assignment.pairs {
                if col >= detections.len() || cost[row][col] >= FORBIDDEN {
                    continue;
                }
                let track = &mut self.tracks[row];
                kf_update(&mut track.kf, &detections[col]);
                track.time_since_update = 0;
                track.hits += 1;
                det_matched[col] = true;
            }
        }

        for (d, matched) in det_matched.iter().enumerate() {
            if !matched {
                self.tracks.push(KfTrack {
                    id: self.next_id,
                    kf: KfState::from_box(&detections[d], &cfg.noise),
                    time_since_update: 0,
                    hits: 1,
                });
                self.next_id += 1;
            }
        }

        self.tracks.retain(|t| t.time_since_update <= cfg.max_age);

        self.tracks
            .iter()
            .filter(|t| t.time_since_update == 0 && t.hits >= cfg.min_hits)
            .map(|t| (t.id, t.kf.bbox()))
            .collect()
    }
}

/// Track a whole sequence of per-frame detections.
pub fn sort_track_sequence(frames: &[Vec<BBox>], cfg: &SortConfig) -> Vec<Vec<(u64, BBox)>> {
    let mut tracker = SortTracker::new();
    frames.iter().map(|dets| tracker.step(dets, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::Rng;

    fn bb(cx: f64, cy: f64) -> BBox {
        BBox::new(cx, cy, 0.2, 0.3)
    }

    #[test]
    fn predict_stationary_keeps_position() {
        let mut kf = KfState::from_box(&bb(0.5, 0.5), &KfNoise::default());
        kf_predict(&mut kf);
        assert!((kf.x[0] - 0.5).abs() < 1e-12);
        assert!((kf.x[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn predict_advances_by_velocity() {
        let mut kf = KfState::from_box(&bb(0.5, 0.5), &KfNoise::default());
        kf.x[4] = 0.01;
        kf_predict(&mut kf);
        assert!((kf.x[0] - 0.51).abs() < 1e-12);
    }

    /// Two predicts with zero process noise equal one predict with the
    /// squared transition.
    #[test]
    fn double_predict_matches_squared_transition() {
        let noise = KfNoise {
            measurement_var: 1e-4,
            process_var: 0.0,
        };
        let mut kf = KfState::from_box(&bb(0.4, 0.6), &KfNoise::default());
        kf.q = super::zeros(DIM, DIM);
        kf.x[4] = 0.02;
        kf.x[5] = -0.01;
        let f = transition();
        let f2 = mat_mul(&f, &f);
        let expect_x: Vec<f64> = f2
            .iter()
            .map(|row| row.iter().zip(&kf.x).map(|(a, b)| a * b).sum())
            .collect();
        let expect_p = mat_mul(&mat_mul(&f2, &kf.p), &mat_t(&f2));

        kf_predict(&mut kf);
        kf_predict(&mut kf);
        for (a, b) in kf.x.iter().zip(&expect_x) {
            assert!((a - b).abs() < 1e-12);
        }
        for (ra, rb) in kf.p.iter().zip(&expect_p) {
            for (a, b) in ra.iter().zip(rb) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let _ = noise;
    }

    /// With zero measurement noise the update snaps the observed state to
    /// the measurement exactly.
    #[test]
    fn zero_measurement_noise_snaps_to_measurement() {
        let noise = KfNoise {
            measurement_var: 0.0,
            process_var: 1e-6,
        };
        let mut kf = KfState::from_box(&bb(0.5, 0.5), &KfNoise::default());
        kf.r = super::zeros(OBS, OBS);
        let _ = noise;
        // seed nonzero position uncertainty so the gain is defined
        kf_predict(&mut kf);
        let z = bb(0.57, 0.44);
        kf_update(&mut kf, &z);
        let (z0, z1, z2, z3) = super::box_to_obs(&z);
        assert!((kf.x[0] - z0).abs() < 1e-9);
        assert!((kf.x[1] - z1).abs() < 1e-9);
        assert!((kf.x[2] - z2).abs() < 1e-9);
        assert!((kf.x[3] - z3).abs() < 1e-9);
    }

    /// Covariance stays symmetric and positive semidefinite through random
    /// predict/update trajectories.
    #[test]
    fn covariance_stays_symmetric_psd() {
        let mut rng = Rng::from_seed(5);
        for _ in 0..20 {
            let mut kf = KfState::from_box(&bb(0.5, 0.5), &KfNoise::default());
            for _ in 0..30 {
                kf_predict(&mut kf);
                if rng.uniform() < 0.7 {
                    let z = bb(
                        rng.uniform_in(0.3, 0.7),
                        rng.uniform_in(0.3, 0.7),
                    );
                    kf_update(&mut kf, &z);
                }
                for i in 0..DIM {
                    for j in 0..DIM {
                        assert!((kf.p[i][j] - kf.p[j][i]).abs() < 1e-12);
                    }
                }
                // random quadratic forms as a PSD probe
                for _ in 0..8 {
                    let v: Vec<f64> = (0..DIM).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
                    let mut quad = 0.0;
                    for i in 0..DIM {
                        for j in 0..DIM {
                            quad += v[i] * kf.p[i][j] * v[j];
                        }
                    }
                    assert!(quad > -1e-9, "negative quadratic form {quad}");
                }
            }
        }
    }

    #[test]
    fn stationary_detections_keep_identities() {
        let cfg = SortConfig::default();
        let frames: Vec<Vec<BBox>> = (0..10)
            .map(|_| vec![bb(0.3, 0.3), bb(0.7, 0.7)])
            .collect();
        let out = sort_track_sequence(&frames, &cfg);
        let first: Vec<u64> = {
            let mut ids: Vec<u64> = out[0].iter().map(|d| d.0).collect();
            ids.sort();
            ids
        };
        for frame in &out {
            assert_eq!(frame.len(), 2);
            let mut ids: Vec<u64> = frame.iter().map(|d| d.0).collect();
            ids.sort();
            assert_eq!(ids, first, "identities must stay constant");
        }
    }

    #[test]
    fn long_gap_issues_new_identity() {
        let cfg = SortConfig::default();
        let mut tracker = SortTracker::new();
        let present = vec![bb(0.5, 0.5)];
        let absent: Vec<BBox> = Vec::new();

        let first = tracker.step(&present, &cfg);
        let original = first[0].0;
        for _ in 0..cfg.max_age + 1 {
            let out = tracker.step(&absent, &cfg);
            assert!(out.is_empty());
        }
        assert_eq!(tracker.track_count(), 0, "track aged out");
        let back = tracker.step(&present, &cfg);
        assert_ne!(back[0].0, original, "new identity after a long gap");
    }

    /// A moving object with one dropped frame survives through prediction:
    /// the predicted box still overlaps the true continuation above the
    /// association threshold.
    #[test]
    fn dropped_frame_bridged_by_prediction() {
        let cfg = SortConfig::default();
        let mut tracker = SortTracker::new();
        let speed = 0.02;
        let at = |i: usize| bb(0.2 + speed * i as f64, 0.5);

        let mut id0 = None;
        for i in 0..6 {
            let out = tracker.step(&[at(i)], &cfg);
            assert_eq!(out.len(), 1);
            id0.get_or_insert(out[0].0);
        }
        // frame 6 dropped
        let out = tracker.step(&[], &cfg);
        assert!(out.is_empty());
        // frame 7: must re-associate with the same identity
        let out = tracker.step(&[at(7)], &cfg);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].0, id0.unwrap(), "prediction must bridge the gap");
        assert_eq!(tracker.track_count(), 1);
    }

    /// Association never uses a detection or a track twice.
    #[test]
    fn association_is_a_matching() {
        let mut rng = Rng::from_seed(11);
        let cfg = SortConfig::default();
        let mut tracker = SortTracker::new();
        for _ in 0..20 {
            let n = rng.below(5);
            let dets: Vec<BBox> = (0..n)
                .map(|_| {
                    BBox::new(
                        rng.uniform_in(0.2, 0.8),
                        rng.uniform_in(0.2, 0.8),
                        rng.uniform_in(0.1, 0.3),
                        rng.uniform_in(0.1, 0.3),
                    )
                })
                .collect();
            let out = tracker.step(&dets, &cfg);
            let mut ids: Vec<u64> = out.iter().map(|d| d.0).collect();
            let len = ids.len();
            ids.sort();
            ids.dedup();
            assert_eq!(ids.len(), len, "duplicate identity in one frame");
            assert!(out.len() <= dets.len(), "reported more than detected");
        }
    }
}
