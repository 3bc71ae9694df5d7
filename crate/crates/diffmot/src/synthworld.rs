//! Deterministic synthetic crowd sequences and the file formats binding
//! the system to disk.
//!
//! Scenes are colored rectangles on mid-gray: enough visual signal for the
//! patch-attention extractor to learn color and position without real-image
//! machinery. Occlusion uses a depth-ordered painter's algorithm and keeps
//! the hidden ground-truth row, flagged, so re-identification is testable.

use crate::assign::{Target, TargetSet, PERSON};
use crate::geom::{iou, BBox};
use crate::ndgrad::Rng;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible preset: {0}")]
    Infeasible(String),
    #[error("{path}:{line}: malformed {field} field: {detail}")]
    Csv {
        path: String,
        line: usize,
        field: &'static str,
        detail: String,
    },
    #[error("ppm: {0}")]
    Ppm(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// RGB image with values in [0, 1], row-major, three channels per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl Frame {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Frame {
            width,
            height,
            pixels: vec![value; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> (f64, f64, f64) {
        let i = (y * self.width + x) * 3;
        (self.pixels[i], self.pixels[i + 1], self.pixels[i + 2])
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: (f64, f64, f64)) {
        let i = (y * self.width + x) * 3;
        self.pixels[i] = rgb.0;
        self.pixels[i + 1] = rgb.1;
        self.pixels[i + 2] = rgb.2;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PresetKind {
    Easy,
    Crossing,
    Occlusion,
    Crowd,
}

impl PresetKind {
    pub fn parse(s: &str) -> Option<PresetKind> {
        match s {
            "easy" => Some(PresetKind::Easy),
            "crossing" => Some(PresetKind::Crossing),
            "occlusion" => Some(PresetKind::Occlusion),
            "crowd" => Some(PresetKind::Crowd),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PresetKind::Easy => "easy",
            PresetKind::Crossing => "crossing",
            PresetKind::Occlusion => "occlusion",
            PresetKind::Crowd => "crowd",
        }
    }
}

/// Scenario parameters. Constructors fill per-kind defaults; everything is
/// overridable before generation.
#[derive(Debug, Clone)]
pub struct ScenarioPreset {
    pub kind: PresetKind,
    pub frame_w: usize,
    pub frame_h: usize,
    pub person_min: usize,
    pub person_max: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    pub seq_len: usize,
    /// Frames the scripted occlusion pass should take (occlusion preset).
    pub occlusion_gap: usize,
    /// Overlap fraction of the back box above which it is flagged occluded.
    pub occlusion_overlap: f64,
    /// Amplitude of per-pixel uniform noise added at render time.
    pub pixel_noise: f64,
    pub seed: u64,
}

impl ScenarioPreset {
    pub fn new(kind: PresetKind, seed: u64) -> Self {
        let base = ScenarioPreset {
            kind,
            frame_w: 64,
            frame_h: 64,
            person_min: 2,
            person_max: 4,
            speed_min: 0.003,
            speed_max: 0.01,
            seq_len: 60,
            occlusion_gap: 4,
            occlusion_overlap: 0.6,
            pixel_noise: 0.0,
            seed,
        };
        match kind {
            PresetKind::Easy => base,
            PresetKind::Crossing => ScenarioPreset {
                person_min: 2,
                person_max: 3,
                speed_min: 0.008,
                speed_max: 0.015,
                ..base
            },
            PresetKind::Occlusion => ScenarioPreset {
                person_min: 2,
                person_max: 2,
                ..base
            },
            PresetKind::Crowd => ScenarioPreset {
                person_min: 6,
                person_max: 9,
                speed_min: 0.005,
                speed_max: 0.015,
                seq_len: 80,
                ..base
            },
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.person_min == 0 || self.person_min > self.person_max {
            return Err(SynthError::Infeasible("empty person count range".into()));
        }
        if self.speed_min > self.speed_max || self.seq_len == 0 {
            return Err(SynthError::Infeasible("empty range".into()));
        }
        if self.kind == PresetKind::Occlusion && self.occlusion_gap >= self.seq_len {
            return Err(SynthError::Infeasible(
                "occlusion gap must be shorter than the sequence".into(),
            ));
        }
        Ok(())
    }
}

/// One ground-truth row: identity, box, and whether the person is mostly
/// hidden behind a nearer one this frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtEntry {
    pub id: u64,
    pub bbox: BBox,
    pub occluded: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Occlusion { front: u64, back: u64 },
    Crossing { a: u64, b: u64 },
}

/// Annotated interval of frames (inclusive bounds).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub kind: EventKind,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub frames: Vec<Frame>,
    pub gt: Vec<Vec<GtEntry>>,
    pub events: Vec<Event>,
}

impl SyntheticSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Convert a ground-truth frame to a matching target set; identities are
/// unique by construction.
pub fn gt_to_targets(entries: &[GtEntry]) -> TargetSet {
    TargetSet::new(
        entries
            .iter()
            .map(|e| Target {
                id: e.id,
                class: PERSON,
                bbox: e.bbox,
            })
            .collect(),
    )
    .expect("generator produces unique identities")
}

/// Visible (non-occluded) rows only: what a frame-level detector could see.
pub fn visible_targets(entries: &[GtEntry]) -> TargetSet {
    TargetSet::new(
        entries
            .iter()
            .filter(|e| !e.occluded)
            .map(|e| Target {
                id: e.id,
                class: PERSON,
                bbox: e.bbox,
            })
            .collect(),
    )
    .expect("generator produces unique identities")
}

#[derive(Debug, Clone, Copy)]
struct Mover {
    id: u64,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    vx: f64,
    vy: f64,
}

impl Mover {
    fn bbox(&self) -> BBox {
        BBox::new(self.cx, self.cy, self.w, self.h)
    }

    fn advance(&mut self) {
        self.cx += self.vx;
        self.cy += self.vy;
        // reflect at the walls, keeping the whole box inside the frame
        let (mx, my) = (self.w / 2.0, self.h / 2.0);
        if self.cx < mx {
            self.cx = 2.0 * mx - self.cx;
            self.vx = -self.vx;
        }
        if self.cx > 1.0 - mx {
            self.cx = 2.0 * (1.0 - mx) - self.cx;
            self.vx = -self.vx;
        }
        if self.cy < my {
            self.cy = 2.0 * my - self.cy;
            self.vy = -self.vy;
        }
        if self.cy > 1.0 - my {
            self.cy = 2.0 * (1.0 - my) - self.cy;
            self.vy = -self.vy;
        }
    }
}

/// Generate a sequence: constant-velocity trajectories with boundary
/// reflection, per-kind scripting, painter's-algorithm rendering, and
/// occlusion flags derived from the realized overlaps. Deterministic per
/// seed.
pub fn generate(preset: &ScenarioPreset) -> Result<SyntheticSequence, SynthError> {
    preset.validate()?;
    let mut rng = Rng::derive(preset.seed, 0x5e9);

    let trajectories = match preset.kind {
        PresetKind::Easy => easy_trajectories(preset, &mut rng)?,
        PresetKind::Crossing => crossing_trajectories(preset, &mut rng),
        PresetKind::Occlusion => occlusion_trajectories(preset, &mut rng),
        PresetKind::Crowd => crowd_trajectories(preset, &mut rng)?,
    };
    let n_people = trajectories.first().map_or(0, Vec::len);

    // depth: higher identity renders in front (scripts order ids to match)
    let mut gt: Vec<Vec<GtEntry>> = Vec::with_capacity(preset.seq_len);
    for frame_movers in &trajectories {
        let mut entries: Vec<GtEntry> = frame_movers
            .iter()
            .map(|m| GtEntry {
                id: m.id,
                bbox: m.bbox(),
                occluded: false,
            })
            .collect();
        for i in 0..entries.len() {
            let area = entries[i].bbox.area();
            if area <= 0.0 {
                continue;
            }
            let mut hidden = 0.0f64;
            for e in &entries {
                if e.id > entries[i].id {
                    hidden = hidden.max(intersection(&entries[i].bbox, &e.bbox) / area);
                }
            }
            if hidden > preset.occlusion_overlap {
                entries[i].occluded = true;
            }
        }
        gt.push(entries);
    }

    let events = derive_events(preset, &gt);

    // self-checks on the realized geometry
    match preset.kind {
        PresetKind::Easy => {
            for (f, entries) in gt.iter().enumerate() {
                for i in 0..entries.len() {
                    for j in i + 1..entries.len() {
                        let overlap = iou(&entries[i].bbox, &entries[j].bbox);
                        if overlap > 0.1 {
                            return Err(SynthError::Infeasible(format!(
                                "easy preset produced IoU {overlap:.3} at frame {f}"
                            )));
                        }
                    }
                }
            }
        }
        PresetKind::Occlusion => {
            let peak = gt
                .iter()
                .flat_map(|entries| {
                    entries.iter().enumerate().flat_map(move |(i, a)| {
                        entries[i + 1..].iter().map(move |b| iou(&a.bbox, &b.bbox))
                    })
                })
                .fold(0.0f64, f64::max);
            if peak <= 0.6 {
                return Err(SynthError::Infeasible(format!(
                    "occlusion preset peaked at IoU {peak:.3}"
                )));
            }
        }
        _ => {}
    }

    let frames = gt
        .iter()
        .enumerate()
        .map(|(idx, entries)| render_frame(preset, idx, entries))
        .collect();

    let _ = n_people;
    Ok(SyntheticSequence { frames, gt, events })
}

fn intersection(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.to_corners();
    let (bx1, by1, bx2, by2) = b.to_corners();
    let w = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let h = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    w * h
}

fn sample_size(rng: &mut Rng) -> (f64, f64) {
    (rng.uniform_in(0.14, 0.22), rng.uniform_in(0.2, 0.3))
}

fn roll_out(movers: &[Mover], frames: usize) -> Vec<Vec<Mover>> {
    let mut state = movers.to_vec();
    let mut out = Vec::with_capacity(frames);
    for _ in 0..frames {
        out.push(state.clone());
        for m in &mut state {
            m.advance();
        }
    }
    out
}

/// Well-separated people: each trajectory is accepted only if it never
/// overlaps an already-accepted one above IoU 0.1.
fn easy_trajectories(
    preset: &ScenarioPreset,
    rng: &mut Rng,
) -> Result<Vec<Vec<Mover>>, SynthError> {
    let count = preset.person_min + rng.below(preset.person_max - preset.person_min + 1);
    let mut accepted: Vec<Vec<Mover>> = Vec::new(); // per person, per frame
    for id in 0..count as u64 {
        let mut placed = false;
        for _ in 0..2000 {
            let (w, h) = sample_size(rng);
            let speed = rng.uniform_in(preset.speed_min, preset.speed_max);
            let angle = rng.uniform_in(0.0, std::f64::consts::TAU);
            let candidate = Mover {
                id,
                cx: rng.uniform_in(w / 2.0, 1.0 - w / 2.0),
                cy: rng.uniform_in(h / 2.0, 1.0 - h / 2.0),
                w,
                h,
                vx: speed * angle.cos(),
                vy: speed * angle.sin(),
            };
            let mut m = candidate;
            let mut path = Vec::with_capacity(preset.seq_len);
            for _ in 0..preset.seq_len {
                path.push(m);
                m.advance();
            }
            let clear = accepted.iter().all(|other| {
                path.iter()
                    .zip(other)
                    .all(|(a, b)| iou(&a.bbox(), &b.bbox()) <= 0.08)
            });
            if clear {
                accepted.push(path);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SynthError::Infeasible(format!(
                "could not place {count} separated people"
            )));
        }
    }
    // transpose person-major to frame-major
    Ok((0..preset.seq_len)
        .map(|f| accepted.iter().map(|p| p[f]).collect())
        .collect())
}

/// Two people on deliberately intersecting horizontal paths.
fn crossing_trajectories(preset: &ScenarioPreset, rng: &mut Rng) -> Vec<Vec<Mover>> {
    let speed = rng.uniform_in(preset.speed_min, preset.speed_max);
    let y = rng.uniform_in(0.35, 0.65);
    let (w0, h0) = sample_size(rng);
    let (w1, h1) = sample_size(rng);
    let travel = speed * preset.seq_len as f64;
    let a = Mover {
        id: 0,
        cx: (0.5 - travel / 2.0).max(w0 / 2.0),
        cy: y,
        w: w0,
        h: h0,
        vx: speed,
        vy: 0.0,
    };
    let b = Mover {
        id: 1,
        cx: (0.5 + travel / 2.0).min(1.0 - w1 / 2.0),
        cy: y + rng.uniform_in(-0.03, 0.03),
        w: w1,
        h: h1,
        vx: -speed,
        vy: 0.0,
    };
    roll_out(&[a, b], preset.seq_len)
}

/// A static person occluded by one passing in front. The passer's speed is
/// set so the pass spans roughly `occlusion_gap` frames.
fn occlusion_trajectories(preset: &ScenarioPreset, rng: &mut Rng) -> Vec<Vec<Mover>> {
    let (w0, h0) = sample_size(rng);
    let back = Mover {
        id: 0,
        cx: 0.5,
        cy: 0.5,
        w: w0,
        h: h0,
        vx: 0.0,
        vy: 0.0,
    };
    let (w1, h1) = (w0 * 1.1, h0 * 1.1); // front fully covers at closest pass
    let speed = (w0 + w1) / (2.0 * preset.occlusion_gap.max(1) as f64);
    let start_x = 0.5 - speed * preset.seq_len as f64 / 2.0;
    let front = Mover {
        id: 1,
        cx: start_x.max(w1 / 2.0),
        cy: 0.5,
        w: w1,
        h: h1,
        vx: speed,
        vy: 0.0,
    };
    let _ = rng;
    roll_out(&[back, front], preset.seq_len)
}

/// Dense scene, overlaps allowed.
fn crowd_trajectories(
    preset: &ScenarioPreset,
    rng: &mut Rng,
) -> Result<Vec<Vec<Mover>>, SynthError> {
    let count = preset.person_min + rng.below(preset.person_max - preset.person_min + 1);
    if count * 2 > 40 {
        return Err(SynthError::Infeasible(format!("{count} people")));
    }
    let movers: Vec<Mover> = (0..count as u64)
        .map(|id| {
            let (w, h) = sample_size(rng);
            let speed = rng.uniform_in(preset.speed_min, preset.speed_max);
            let angle = rng.uniform_in(0.0, std::f64::consts::TAU);
            Mover {
                id,
                cx: rng.uniform_in(w / 2.0, 1.0 - w / 2.0),
                cy: rng.uniform_in(h / 2.0, 1.0 - h / 2.0),
                w,
                h,
                vx: speed * angle.cos(),
                vy: speed * angle.sin(),
            }
        })
        .collect();
    Ok(roll_out(&movers, preset.seq_len))
}

/// Intervals where a pair overlaps: flagged-occluded frames become
/// occlusion events (front = nearer identity), other contact becomes
/// crossing events.
fn derive_events(preset: &ScenarioPreset, gt: &[Vec<GtEntry>]) -> Vec<Event> {
    let mut events = Vec::new();
    let n = gt.first().map_or(0, Vec::len);
    for i in 0..n {
        for j in i + 1..n {
            let mut occl_run: Option<usize> = None;
            let mut cross_run: Option<usize> = None;
            for (f, entries) in gt.iter().enumerate() {
                let (a, b) = (&entries[i], &entries[j]);
                let occluded_pair = a.occluded || b.occluded;
                let touching = iou(&a.bbox, &b.bbox) > 0.0;
                match (occl_run, occluded_pair) {
                    (None, true) => occl_run = Some(f),
                    (Some(start), false) => {
                        events.push(Event {
                            kind: EventKind::Occlusion {
                                front: a.id.max(b.id),
                                back: a.id.min(b.id),
                            },
                            start,
                            end: f - 1,
                        });
                        occl_run = None;
                    }
                    _ => {}
                }
                match (cross_run, touching && !occluded_pair) {
                    (None, true) => cross_run = Some(f),
                    (Some(start), false) => {
                        events.push(Event {
                            kind: EventKind::Crossing { a: a.id, b: b.id },
                            start,
                            end: f - 1,
                        });
                        cross_run = None;
                    }
                    _ => {}
                }
            }
            let last = gt.len() - 1;
            if let Some(start) = occl_run {
                events.push(Event {
                    kind: EventKind::Occlusion {
                        front: j as u64,
                        back: i as u64,
                    },
                    start,
                    end: last,
                });
            }
            if let Some(start) = cross_run {
                events.push(Event {
                    kind: EventKind::Crossing {
                        a: i as u64,
                        b: j as u64,
                    },
                    start,
                    end: last,
                });
            }
        }
    }
    let _ = preset;
    events.sort_by_key(|e| e.start);
    events
}

/// Solid per-identity color from a golden-ratio hue walk.
pub fn identity_color(id: u64) -> (f64, f64, f64) {
    let hue = (id as f64 * 0.618_033_988_749_895).fract();
    hsv_to_rgb(hue, 0.85, 0.9)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i64).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Render one frame: mid-gray background, filled rectangles back-to-front
/// (ascending identity), optional per-pixel uniform noise seeded by
/// (sequence seed, frame index) so re-rendering is pure.
pub fn render_frame(preset: &ScenarioPreset, frame_index: usize, entries: &[GtEntry]) -> Frame {
    let mut frame = Frame::filled(preset.frame_w, preset.frame_h, 0.5);
    let mut order: Vec<&GtEntry> = entries.iter().collect();
    order.sort_by_key(|e| e.id);
    for e in order {
        let color = identity_color(e.id);
        let (x1, y1, x2, y2) = e.bbox.to_corners();
        let px1 = ((x1 * preset.frame_w as f64).round().max(0.0) as usize).min(preset.frame_w);
        let px2 = ((x2 * preset.frame_w as f64).round().max(0.0) as usize).min(preset.frame_w);
        let py1 = ((y1 * preset.frame_h as f64).round().max(0.0) as usize).min(preset.frame_h);
        let py2 = ((y2 * preset.frame_h as f64).round().max(0.0) as usize).min(preset.frame_h);
        for y in py1..py2 {
            for x in px1..px2 {
                frame.set_pixel(x, y, color);
            }
        }
    }
    if preset.pixel_noise > 0.0 {
        let mut rng = Rng::derive(preset.seed, 0xf00d ^ frame_index as u64);
        let a = preset.pixel_noise;
        for v in &mut frame.pixels {
            *v = (*v + rng.uniform_in(-a, a)).clamp(0.0, 1.0);
        }
    }
    frame
}

/// Detector corruption parameters for the tracking-by-detection baseline.
#[derive(Debug, Clone, Copy)]
pub struct DetectionNoise {
    pub jitter_std: f64,
    pub drop_prob: f64,
    pub clutter_rate: f64,
}

/// Corrupt per-frame ground truth into anonymous detections: each box is
/// dropped with `drop_prob`, surviving coordinates are jittered with
/// Gaussian noise, and Poisson-distributed clutter boxes are appended.
pub fn corrupt_detections(
    gt: &[TargetSet],
    noise: &DetectionNoise,
    rng: &mut Rng,
) -> Vec<Vec<BBox>> {
    assert!((0.0..=1.0).contains(&noise.drop_prob));
    gt.iter()
        .map(|frame| {
            let mut dets = Vec::new();
            for t in frame.entries() {
                if rng.uniform() < noise.drop_prob {
                    continue;
                }
                let b = t.bbox;
                dets.push(BBox::new(
                    b.cx + rng.normal_scaled(0.0, noise.jitter_std),
                    b.cy + rng.normal_scaled(0.0, noise.jitter_std),
                    (b.w + rng.normal_scaled(0.0, noise.jitter_std)).max(0.0),
                    (b.h + rng.normal_scaled(0.0, noise.jitter_std)).max(0.0),
                ));
            }
            for _ in 0..rng.poisson(noise.clutter_rate) {
                dets.push(BBox::new(
                    rng.uniform(),
                    rng.uniform(),
                    rng.uniform_in(0.05, 0.3),
                    rng.uniform_in(0.05, 0.3),
                ));
            }
            dets
        })
        .collect()
}

/// One CSV row: identity (-1 for anonymous detections), normalized box,
/// confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotRow {
    pub id: i64,
    pub bbox: BBox,
    pub conf: f64,
}

/// Fixed-point with two decimals, trailing zeros trimmed: `240` not
/// `240.00`, `120.5` not `120.50`. Byte-stable across platforms.
fn fmt_px(v: f64) -> String {
    let r = (v * 100.0).round() / 100.0;
    if r == 0.0 {
        return "0".to_string();
    }
    let mut s = format!("{r:.2}");
    while s.ends_with('0') {
        s.pop();
    }
    if s.ends_with('.') {
        s.pop();
    }
    s
}

/// Write per-frame rows in the interchange format
/// `<frame>,<id>,<bb_left>,<bb_top>,<bb_width>,<bb_height>,<conf>,<x>,<y>,<z>`
/// with 1-based frames, pixel units, and x,y,z fixed at -1.
pub fn mot_csv_write(
    frames: &[Vec<MotRow>],
    width: usize,
    height: usize,
    path: &Path,
) -> Result<(), SynthError> {
    let mut out = String::new();
    for (fi, rows) in frames.iter().enumerate() {
        for row in rows {
            let (x1, y1, _, _) = row.bbox.to_corners();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},-1,-1,-1",
                fi + 1,
                row.id,
                fmt_px(x1 * width as f64),
                fmt_px(y1 * height as f64),
                fmt_px(row.bbox.w * width as f64),
                fmt_px(row.bbox.h * height as f64),
                fmt_px(row.conf),
            );
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Exact inverse of [`mot_csv_write`]: parse rows back to normalized boxes,
/// bucketed per frame (index 0 is frame 1).
pub fn mot_csv_read(
    path: &Path,
    width: usize,
    height: usize,
) -> Result<Vec<Vec<MotRow>>, SynthError> {
    let text = std::fs::read_to_string(path)?;
    let pathname = path.display().to_string();
    let mut buckets: Vec<(usize, MotRow)> = Vec::new();
    let mut max_frame = 0usize;
    for (ln, line) in text.lines().enumerate() {
        let line_no = ln + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(SynthError::Csv {
                path: pathname,
                line: line_no,
                field: "count",
                detail: format!("expected 10 fields, found {}", fields.len()),
            });
        }
        let parse_f = |idx: usize, field: &'static str| -> Result<f64, SynthError> {
            fields[idx].trim().parse::<f64>().map_err(|e| SynthError::Csv {
                path: pathname.clone(),
                line: line_no,
                field,
                detail: format!("'{}': {e}", fields[idx]),
            })
        };
        let frame: usize = fields[0].trim().parse().map_err(|e| SynthError::Csv {
            path: pathname.clone(),
            line: line_no,
            field: "frame",
            detail: format!("'{}': {e}", fields[0]),
        })?;
        if frame == 0 {
            return Err(SynthError::Csv {
                path: pathname,
                line: line_no,
                field: "frame",
                detail: "frames are 1-based".into(),
            });
        }
        let id: i64 = fields[1].trim().parse().map_err(|e| SynthError::Csv {
            path: pathname.clone(),
            line: line_no,
            field: "id",
            detail: format!("'{}': {e}", fields[1]),
        })?;
        let left = parse_f(2, "bb_left")?;
        let top = parse_f(3, "bb_top")?;
        let w = parse_f(4, "bb_width")?;
        let h = parse_f(5, "bb_height")?;
        let conf = parse_f(6, "conf")?;
        let bbox = BBox::new(
            (left + w / 2.0) / width as f64,
            (top + h / 2.0) / height as f64,
            w / width as f64,
            h / height as f64,
        );
        max_frame = max_frame.max(frame);
        buckets.push((frame, MotRow { id, bbox, conf }));
    }
    let mut frames = vec![Vec::new(); max_frame];
    for (frame, row) in buckets {
        frames[frame - 1].push(row);
    }
    Ok(frames)
}

/// Binary PPM (P6, 8-bit) writer.
pub fn ppm_write(frame: &Frame, path: &Path) -> Result<(), SynthError> {
    let mut buf = format!("P6\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    buf.reserve(frame.pixels.len());
    for v in &frame.pixels {
        buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn ppm_read(path: &Path) -> Result<Frame, SynthError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let header_err = |msg: &str| SynthError::Ppm(format!("{}: {msg}", path.display()));
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Option<(usize, usize)> {
        let mut start = pos;
        while start < bytes.len() && bytes[start].is_ascii_whitespace() {
            start += 1;
        }
        let mut end = start;
        while end < bytes.len() && !bytes[end].is_ascii_whitespace() {
            end += 1;
        }
        if start == end {
            return None;
        }
        pos = end;
        Some((start, end))
    };
    let (s, e) = token(&bytes).ok_or_else(|| header_err("missing magic"))?;
    if &bytes[s..e] != b"P6" {
        return Err(header_err("not a P6 file"));
    }
    let mut read_num = |bytes: &[u8], what: &str| -> Result<usize, SynthError> {
        let (s, e) = token(bytes).ok_or_else(|| header_err(&format!("missing {what}")))?;
        std::str::from_utf8(&bytes[s..e])
            .ok()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| header_err(&format!("bad {what}")))
    };
    let width = read_num(&bytes, "width")?;
    let height = read_num(&bytes, "height")?;
    let maxval = read_num(&bytes, "maxval")?;
    if maxval != 255 {
        return Err(header_err("maxval must be 255"));
    }
    let data_start = pos + 1; // single whitespace after maxval
    let need = width * height * 3;
    if bytes.len() < data_start + need {
        return Err(header_err("truncated pixel data"));
    }
    let pixels = bytes[data_start..data_start + need]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Ok(Frame {
        width,
        height,
        pixels,
    })
}

/// Write a sequence's frames as zero-padded 6-digit PPM files plus a
/// ground-truth CSV, under `dir`.
pub fn export_sequence(
    seq: &SyntheticSequence,
    width: usize,
    height: usize,
    dir: &Path,
) -> Result<(), SynthError> {
    let frames_dir = dir.join("frames");
    std::fs::create_dir_all(&frames_dir)?;
    for (i, frame) in seq.frames.iter().enumerate() {
        ppm_write(frame, &frames_dir.join(format!("{:06}.ppm", i + 1)))?;
    }
    let rows: Vec<Vec<MotRow>> = seq
        .gt
        .iter()
        .map(|entries| {
            entries
                .iter()
                .map(|e| MotRow {
                    id: e.id as i64,
                    bbox: e.bbox,
                    conf: 1.0,
                })
                .collect()
        })
        .collect();
    mot_csv_write(&rows, width, height, &dir.join("gt.csv"))?;
    Ok(())
}
