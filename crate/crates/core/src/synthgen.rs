//! Deterministic procedural skill episodes.
//!
//! Scenes are drawn with integer-only rasterization in 1/16 pixel fixed point:
//! a task board seen from a camera riding on the robot, the gripper fingers
//! fixed in camera coordinates, and skill-specific objects (peg, socket,
//! door). Pixel noise is seeded per frame from `(seed, frame_index)`.
//!
//! Ground-truth risky intervals are the frames where the fault visibly changes
//! the noise-free render, split at the pre/transit/post boundaries of the
//! skill (30% and 70% of the episode).

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{EpisodeRecord, Label, Provenance, RiskyInterval};
use crate::frame::{Frame, FRAME_PIXELS, FRAME_SIZE};

pub const DEFAULT_FRAMES: usize = 200;
pub const SUPERVISOR_SOURCE: &str = "simulated_supervisor";

const FP: i64 = 16;
const TRIG_ONE: i64 = 1 << 14;
const SIDE: i64 = FRAME_SIZE as i64;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("fault {fault} does not apply to skill {skill}")]
    InvalidFaultForSkill { skill: String, fault: String },
    #[error("unknown skill {0}")]
    UnknownSkill(String),
    #[error("unknown profile {0}")]
    UnknownProfile(String),
    #[error("invalid scene parameters: {0}")]
    InvalidParams(String),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Skill {
    PickPeg,
    OpenDoor,
    PlacePeg,
}

impl Skill {
    pub const ALL: [Skill; 3] = [Skill::PickPeg, Skill::OpenDoor, Skill::PlacePeg];

    pub fn name(self) -> &'static str {
        match self {
            Skill::PickPeg => "pick_peg",
            Skill::OpenDoor => "open_door",
            Skill::PlacePeg => "place_peg",
        }
    }

    pub fn parse(s: &str) -> Result<Skill> {
        Skill::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| SynthError::UnknownSkill(s.to_string()))
    }

    /// Fault kinds that appear in training executions and seen-fault tests.
    pub fn seen_faults(self) -> Vec<FaultSpec> {
        match self {
            Skill::PickPeg => vec![
                FaultSpec::PegMissing,
                FaultSpec::PegRotation { angle: 45.0 },
                FaultSpec::CableGrasped,
            ],
            Skill::OpenDoor => vec![FaultSpec::DoorOpenAtStart, FaultSpec::DoorShutsMidway],
            Skill::PlacePeg => vec![
                FaultSpec::PegMissing,
                FaultSpec::PegRotation { angle: 45.0 },
                FaultSpec::CableGrasped,
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultSpec {
    None,
    DoorOpenAtStart,
    DoorShutsMidway,
    PegMissing,
    PegRotation { angle: f64 },
    CableGrasped,
    Clutter,
    HandIntrusion { start_frame: usize, end_frame: usize },
}

impl FaultSpec {
    pub fn name(&self) -> &'static str {
        match self {
            FaultSpec::None => "none",
            FaultSpec::DoorOpenAtStart => "door_open_at_start",
            FaultSpec::DoorShutsMidway => "door_shuts_midway",
            FaultSpec::PegMissing => "peg_missing",
            FaultSpec::PegRotation { .. } => "peg_rotation",
            FaultSpec::CableGrasped => "cable_grasped",
            FaultSpec::Clutter => "clutter",
            FaultSpec::HandIntrusion { .. } => "hand_intrusion",
        }
    }

    pub fn is_novel(&self) -> bool {
        matches!(self, FaultSpec::Clutter | FaultSpec::HandIntrusion { .. })
    }

    fn validate(&self, skill: Skill, n: usize) -> Result<()> {
        let ok = match self {
            FaultSpec::None | FaultSpec::Clutter => true,
            FaultSpec::HandIntrusion { start_frame, end_frame } => {
                if start_frame >= end_frame || *end_frame > n {
                    return Err(SynthError::InvalidParams(format!(
                        "intrusion window {start_frame}..{end_frame} outside 0..{n}"
                    )));
                }
                true
            }
            FaultSpec::DoorOpenAtStart | FaultSpec::DoorShutsMidway => skill == Skill::OpenDoor,
            FaultSpec::PegMissing | FaultSpec::CableGrasped => skill != Skill::OpenDoor,
            FaultSpec::PegRotation { angle } => {
                if !(0.0..=90.0).contains(angle) {
                    return Err(SynthError::InvalidParams(format!("rotation {angle} outside [0, 90]")));
                }
                skill != Skill::OpenDoor
            }
        };
        if ok {
            Ok(())
        } else {
            Err(SynthError::InvalidFaultForSkill {
                skill: skill.name().into(),
                fault: self.name().into(),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub skill: Skill,
    pub n_frames: usize,
    pub seed: u64,
    /// Pixel noise standard deviation in `[0, 1]` units.
    pub noise_amplitude: f64,
    /// Peak camera wobble in pixels.
    pub camera_drift: f64,
    /// Peak per-episode brightness offset in 8-bit levels.
    pub brightness_jitter: u8,
}

impl SceneParams {
    pub fn new(skill: Skill, seed: u64) -> Self {
        SceneParams {
            skill,
            n_frames: DEFAULT_FRAMES,
            seed,
            noise_amplitude: 0.01,
            camera_drift: 2.0,
            brightness_jitter: 10,
        }
    }
}

// ---------------------------------------------------------------------------
// Integer trigonometry and primitives

/// `sin(deg) * 2^14` via Bhaskara's approximation.
fn isin(deg: i64) -> i64 {
    let d = deg.rem_euclid(360);
    let (d, sign) = if d > 180 { (d - 180, -1) } else { (d, 1) };
    let p = d * (180 - d);
    sign * (4 * p * TRIG_ONE) / (40_500 - p)
}

fn icos(deg: i64) -> i64 {
    isin(deg + 90)
}

fn px(v: i64) -> i64 {
    v * FP
}

/// Integer interpolation of `a → b` as `t` runs over `[t0, t1]` (per-mille).
fn lerp(a: i64, b: i64, t: i64, t0: i64, t1: i64) -> i64 {
    if t <= t0 {
        a
    } else if t >= t1 {
        b
    } else {
        a + (b - a) * (t - t0) / (t1 - t0)
    }
}

struct Canvas {
    px: Vec<i32>,
}

impl Canvas {
    fn new() -> Self {
        Canvas {
            px: vec![0; FRAME_PIXELS],
        }
    }

    /// Calls `inside(dx, dy)` with pixel-centre coordinates in fixed point,
    /// relative to `(cx, cy)`, over a clipped bounding box of half-size
    /// `reach`.
    fn fill<F: Fn(i64, i64) -> bool>(&mut self, cx: i64, cy: i64, reach: i64, value: i32, inside: F) {
        let x0 = ((cx - reach).div_euclid(FP)).max(0);
        let x1 = ((cx + reach).div_euclid(FP) + 1).min(SIDE - 1);
        let y0 = ((cy - reach).div_euclid(FP)).max(0);
        let y1 = ((cy + reach).div_euclid(FP) + 1).min(SIDE - 1);
        for y in y0..=y1 {
            let dy = y * FP + FP / 2 - cy;
            for x in x0..=x1 {
                let dx = x * FP + FP / 2 - cx;
                if inside(dx, dy) {
                    self.px[(y * SIDE + x) as usize] = value;
                }
            }
        }
    }

    fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, value: i32) {
        let (cx, cy) = ((x0 + x1) / 2, (y0 + y1) / 2);
        let reach = (x1 - x0).max(y1 - y0);
        self.fill(cx, cy, reach, value, |dx, dy| {
            let (x, y) = (cx + dx, cy + dy);
            x >= x0 && x < x1 && y >= y0 && y < y1
        });
    }

    fn disc(&mut self, cx: i64, cy: i64, r: i64, value: i32) {
        self.fill(cx, cy, r, value, |dx, dy| dx * dx + dy * dy <= r * r);
    }

    /// Bar of half extents `(hw, hh)` rotated by `deg` about its centre.
    fn bar(&mut self, cx: i64, cy: i64, hw: i64, hh: i64, deg: i64, value: i32) {
        let (s, c) = (isin(deg), icos(deg));
        self.fill(cx, cy, hw + hh, value, |dx, dy| {
            let u = (dx * c + dy * s) / TRIG_ONE;
            let v = (-dx * s + dy * c) / TRIG_ONE;
            u.abs() <= hw && v.abs() <= hh
        });
    }

    /// Thick circular arc drawn as overlapping discs.
    fn arc(&mut self, cx: i64, cy: i64, radius: i64, a0: i64, a1: i64, thick: i64, value: i32) {
        let mut a = a0;
        while a <= a1 {
            let x = cx + radius * icos(a) / TRIG_ONE;
            let y = cy + radius * isin(a) / TRIG_ONE;
            self.disc(x, y, thick, value);
            a += 5;
        }
    }
}

// ---------------------------------------------------------------------------
// Scene

/// Per-episode nuisance variation, fixed by the seed.
#[derive(Debug, Clone)]
struct Variation {
    brightness: i32,
    drift_x: i64,
    drift_y: i64,
    phase_x: i64,
    phase_y: i64,
    period: i64,
    texture_shift: i64,
    clutter: Vec<(i64, i64, i64, i64, i64)>,
    hand_y: i64,
    hand_bumps: Vec<(i64, i64, i64)>,
    /// Benign objects left on the board for the whole episode:
    /// (x, y, half size, value, is_disc).
    props: Vec<(i64, i64, i64, i32, bool)>,
}

impl Variation {
    fn from_params(p: &SceneParams) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ 0x05EE_D0F5_CE9E);
        let b = p.brightness_jitter as i32;
        let drift = (p.camera_drift * FP as f64).round() as i64;
        let amp = |rng: &mut ChaCha8Rng| if drift > 0 { rng.gen_range(-drift..=drift) } else { 0 };
        let drift_x = amp(&mut rng);
        let drift_y = amp(&mut rng);
        let clutter = (0..4)
            .map(|_| {
                (
                    px(rng.gen_range(8..56)),
                    px(rng.gen_range(10..56)),
                    px(rng.gen_range(8..16)),
                    rng.gen_range(0..360),
                    rng.gen_range(90..220),
                )
            })
            .collect();
        let hand_bumps = (0..5)
            .map(|_| (px(rng.gen_range(-10..10)), px(rng.gen_range(-10..10)), px(rng.gen_range(5..10))))
            .collect();
        let mut var = Variation {
            brightness: if b > 0 { rng.gen_range(-b..=b) } else { 0 },
            drift_x,
            drift_y,
            phase_x: rng.gen_range(0..360),
            phase_y: rng.gen_range(0..360),
            period: rng.gen_range(60..140),
            texture_shift: rng.gen_range(0..4),
            clutter,
            hand_y: px(rng.gen_range(20..44)),
            hand_bumps,
            props: Vec::new(),
        };
        // one of a few fixed layouts, nudged by a pixel or two
        let layout = PROP_LAYOUTS[rng.gen_range(0..PROP_LAYOUTS.len())];
        var.props = layout
            .iter()
            .map(|&(x, y, h, value, disc)| {
                (px(x + rng.gen_range(-1..=1)), px(y + rng.gen_range(-1..=1)), px(h), value, disc)
            })
            .collect();
        var
    }

    fn wobble(&self, i: i64) -> (i64, i64) {
        let a = i * 360 / self.period;
        (
            self.drift_x * isin(a + self.phase_x) / TRIG_ONE,
            self.drift_y * isin(a + self.phase_y) / TRIG_ONE,
        )
    }
}

/// Benign objects on the board, kept clear of the peg/door column:
/// (x, y, half size, value, is_disc) in pixels.
const PROP_LAYOUTS: [&[(i64, i64, i64, i32, bool)]; 4] = [
    &[],
    &[(12, 30, 4, 30, false)],
    &[(52, 34, 4, 215, true)],
    &[(12, 30, 4, 30, false), (52, 34, 4, 215, true)],
];

const TABLE: i32 = 96;
const BOARD: i32 = 70;
const SOCKET: i32 = 28;
const PEG: i32 = 225;
const FINGER: i32 = 18;
const CABLE: i32 = 8;
const DOOR: i32 = 175;
const DOOR_INTERIOR: i32 = 22;
const HANDLE: i32 = 245;
const HAND: i32 = 205;
const CLUTTER: i32 = 235;

/// Draws the static board in camera coordinates given the world offset.
fn draw_board(c: &mut Canvas, ox: i64, oy: i64, var: &Variation) {
    for y in 0..SIDE {
        for x in 0..SIDE {
            let wx = x * FP - ox;
            let wy = y * FP - oy;
            // soft stripes on the table; board is a dark plate with a rim
            let stripe = ((wy.div_euclid(px(6)) + var.texture_shift) % 2) as i32 * 6;
            let on_board = wx >= px(4) && wx < px(60) && wy >= px(6) && wy < px(70);
            c.px[(y * SIDE + x) as usize] = if on_board { BOARD } else { TABLE + stripe };
        }
    }
    // fixed markings: two buttons and a small screen
    c.disc(px(12) + ox, px(12) + oy, px(3), 200);
    c.disc(px(52) + ox, px(12) + oy, px(3), 130);
    c.rect(px(44) + ox, px(54) + oy, px(58) + ox, px(64) + oy, 120);
    for &(x, y, h, value, disc) in &var.props {
        if disc {
            c.disc(x + ox, y + oy, h, value);
        } else {
            c.rect(x - h + ox, y - h + oy, x + h + ox, y + h + oy, value);
        }
    }
}

fn draw_fingers(c: &mut Canvas, tip: i64, gap: i64) {
    let centre = px(32);
    for side in [-1, 1] {
        let x = centre + side * gap;
        c.rect(x - px(2), 0, x + px(2), tip, FINGER);
    }
}

fn draw_cable(c: &mut Canvas, x: i64, y: i64) {
    c.arc(x - px(6), y, px(6), 0, 90, px(1), CABLE);
    c.arc(x - px(6), y + px(12), px(6), 180, 270, px(1), CABLE);
    c.arc(x - px(18), y + px(12), px(6), 0, 120, px(1), CABLE);
}

struct Render<'a> {
    params: &'a SceneParams,
    var: Variation,
}

impl Render<'_> {
    fn frame(&self, i: usize, fault: &FaultSpec) -> Canvas {
        let n = self.params.n_frames as i64;
        let t = i as i64 * 1000 / n;
        let (wx, wy) = self.var.wobble(i as i64);
        let mut c = Canvas::new();
        match self.params.skill {
            Skill::PickPeg => self.pick_peg(&mut c, t, wx, wy, fault),
            Skill::OpenDoor => self.open_door(&mut c, t, wx, wy, fault),
            Skill::PlacePeg => self.place_peg(&mut c, t, wx, wy, fault),
        }
        self.novel(&mut c, i, t, wx, wy, fault);
        c
    }

    fn peg_angle(fault: &FaultSpec) -> i64 {
        match fault {
            FaultSpec::PegRotation { angle } => angle.round() as i64,
            _ => 0,
        }
    }

    fn pick_peg(&self, c: &mut Canvas, t: i64, wx: i64, wy: i64, fault: &FaultSpec) {
        // camera hovers, descends onto the peg, grasps, then lifts
        let ox = wx;
        let oy = wy + lerp(0, px(-22), t, 600, 1000);
        draw_board(c, ox, oy, &self.var);
        let socket = (px(32) + ox, px(42) + oy);
        c.disc(socket.0, socket.1, px(7), SOCKET);
        let tip = lerp(px(14), px(30), t, 300, 500);
        let gap = lerp(px(9), px(5), t, 500, 600);
        let angle = Self::peg_angle(fault);
        let has_peg = !matches!(fault, FaultSpec::PegMissing);
        let grasped = t >= 600 && !matches!(fault, FaultSpec::CableGrasped);
        if has_peg {
            if grasped {
                // held peg rides with the camera
                c.bar(px(32), px(38), px(3), px(10), angle, PEG);
            } else {
                c.bar(socket.0, socket.1 - px(4), px(3), px(10), angle, PEG);
            }
        }
        if matches!(fault, FaultSpec::CableGrasped) && t >= 550 {
            draw_cable(c, px(32), tip);
        }
        draw_fingers(c, tip, gap);
    }

    fn open_door(&self, c: &mut Canvas, t: i64, wx: i64, wy: i64, fault: &FaultSpec) {
        let ox = wx + lerp(0, px(-6), t, 300, 700);
        let oy = wy;
        draw_board(c, ox, oy, &self.var);
        let nominal = lerp(0, 80, t, 300, 700);
        let angle = match fault {
            FaultSpec::DoorOpenAtStart => 80,
            FaultSpec::DoorShutsMidway => {
                if t < 600 {
                    nominal
                } else {
                    lerp(lerp(0, 80, 600, 300, 700), 0, t, 600, 750)
                }
            }
            _ => nominal,
        };
        let (x0, y0, x1, y1) = (px(14) + ox, px(20) + oy, px(50) + ox, px(52) + oy);
        c.rect(x0, y0, x1, y1, DOOR_INTERIOR);
        let width = (x1 - x0) * icos(angle) / TRIG_ONE;
        if width > 0 {
            c.rect(x0, y0, x0 + width, y1, DOOR);
            c.disc(x0 + width - px(4), (y0 + y1) / 2, px(3), HANDLE);
        }
        draw_fingers(c, px(16), px(7));
    }

    fn place_peg(&self, c: &mut Canvas, t: i64, wx: i64, wy: i64, fault: &FaultSpec) {
        // carry the peg down to the socket, release, and retreat
        let ox = wx;
        let oy = wy + lerp(px(-20), 0, t, 300, 550) + lerp(0, px(-18), t, 650, 1000);
        draw_board(c, ox, oy, &self.var);
        let socket = (px(32) + ox, px(42) + oy);
        c.disc(socket.0, socket.1, px(7), SOCKET);
        let released = t >= 600;
        let gap = lerp(px(5), px(9), t, 550, 650);
        let tip = px(30);
        if !matches!(fault, FaultSpec::PegMissing) {
            if released {
                c.bar(socket.0, socket.1 - px(4), px(3), px(10), Self::peg_angle(fault), PEG);
            } else {
                c.bar(px(32), px(38), px(3), px(10), 0, PEG);
            }
        }
        if matches!(fault, FaultSpec::CableGrasped) && !released {
            draw_cable(c, px(32), tip);
        }
        draw_fingers(c, tip, gap);
    }

    fn novel(&self, c: &mut Canvas, i: usize, t: i64, wx: i64, wy: i64, fault: &FaultSpec) {
        match fault {
            FaultSpec::Clutter => {
                // loose light cables on the board, visible from 20% onwards
                if t >= 200 {
                    for &(x, y, r, a0, span) in &self.var.clutter {
                        c.arc(x + wx, y + wy, r, a0, a0 + span, px(2), CLUTTER);
                        c.disc(x + wx, y + wy, px(3), CLUTTER);
                    }
                }
            }
            FaultSpec::HandIntrusion { start_frame, end_frame } => {
                if i >= *start_frame && i < *end_frame {
                    let len = (*end_frame - *start_frame) as i64;
                    let k = (i - *start_frame) as i64;
                    // reach in from the right edge and withdraw
                    let depth = if 2 * k < len { k * 2 * 1000 / len } else { (len - k) * 2 * 1000 / len };
                    let hx = px(90) - px(56) * depth / 1000;
                    let hy = self.var.hand_y;
                    c.disc(hx, hy, px(15), HAND);
                    for f in 0..4 {
                        c.bar(hx - px(18), hy - px(12) + f * px(8), px(9), px(2), 0, HAND);
                    }
                    for &(dx, dy, r) in &self.var.hand_bumps {
                        c.disc(hx + dx, hy + dy, r, HAND - 20);
                    }
                }
            }
            _ => {}
        }
    }
}

fn noise_seed(seed: u64, i: usize) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed.wrapping_add((i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn finish(canvas: &Canvas, params: &SceneParams, var: &Variation, i: usize) -> Frame {
    // Sum of 12 uniforms on [0, 4096) has standard deviation 4096; scale in
    // 1/256 levels.
    let scale = (params.noise_amplitude * 255.0 * 256.0).round() as i64;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed(params.seed, i));
    let mut out = Vec::with_capacity(FRAME_PIXELS);
    for &v in &canvas.px {
        let noise = if scale > 0 {
            let s: i64 = (0..12).map(|_| (rng.next_u32() & 4095) as i64).sum::<i64>() - 12 * 2048;
            (s * scale).div_euclid(4096 * 256)
        } else {
            0
        };
        out.push((v as i64 + var.brightness as i64 + noise).clamp(0, 255) as u8);
    }
    Frame::from_bytes(out).expect("canvas has frame size")
}


const VISIBLE_LEVEL: i32 = 24;
const VISIBLE_PIXELS: usize = 6;

/// Frames where the fault visibly changes the scene, as maximal runs merged
/// across gaps under 5 frames, split at the 30% and 70% boundaries.
fn truth_intervals(render: &Render<'_>, fault: &FaultSpec) -> Vec<RiskyInterval> {
    let n = render.params.n_frames;
    if *fault == FaultSpec::None {
        return vec![];
    }
    let visible: Vec<bool> = (0..n)
        .map(|i| {
            let a = render.frame(i, &FaultSpec::None);
            let b = render.frame(i, fault);
            a.px.iter().zip(&b.px).filter(|(x, y)| (**x - **y).abs() >= VISIBLE_LEVEL).count() >= VISIBLE_PIXELS
        })
        .collect();
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for (i, &v) in visible.iter().enumerate() {
        if !v {
            continue;
        }
        match runs.last_mut() {
            Some((_, end)) if i - *end < 5 => *end = i + 1,
            _ => runs.push((i, i + 1)),
        }
    }
    let cuts = [n * 3 / 10, n * 7 / 10];
    let mut out = Vec::new();
    for (s, e) in runs {
        let mut bounds = vec![s];
        for &c in &cuts {
            // skip cuts that would leave a sliver
            if c >= s + 3 && c + 3 <= e {
                bounds.push(c);
            }
        }
        bounds.push(e);
        for w in bounds.windows(2) {
            out.push(RiskyInterval {
                start: w[0],
                end: w[1],
                kind: fault.name().to_string(),
            });
        }
    }
    out
}

pub fn generate_episode(
    params: &SceneParams,
    fault: &FaultSpec,
    episode_id: &str,
    provenance: Provenance,
) -> Result<EpisodeRecord> {
    if params.n_frames < 2 {
        return Err(SynthError::InvalidParams(format!("need at least 2 frames, got {}", params.n_frames)));
    }
    if !(params.noise_amplitude >= 0.0) || !(params.camera_drift >= 0.0) {
        return Err(SynthError::InvalidParams("noise and drift must be non-negative".into()));
    }
    fault.validate(params.skill, params.n_frames)?;
    let render = Render {
        params,
        var: Variation::from_params(params),
    };
    let frames = (0..params.n_frames)
        .map(|i| finish(&render.frame(i, fault), params, &render.var, i))
        .collect();
    let mut ep = EpisodeRecord::new(episode_id, params.skill.name(), provenance, frames);
    ep.seed = Some(params.seed);
    ep.fault_spec = Some(fault.clone());
    ep.risky_intervals = truth_intervals(&render, fault);
    Ok(ep)
}

/// Labels a training execution the way a supervisor watching it would:
/// every frame inside a risky interval is marked risky and every
/// `safe_stride`-th frame outside is marked safe.
pub fn supervise(ep: &mut EpisodeRecord, safe_stride: usize) {
    let intervals = ep.risky_intervals.clone();
    for i in 0..ep.len() {
        let risky = intervals.iter().any(|iv| iv.contains(i));
        if risky {
            ep.label_frame(i, Label::Risky, SUPERVISOR_SOURCE).expect("index in range");
        } else if !intervals.is_empty() && safe_stride > 0 && i % safe_stride == 0 {
            ep.label_frame(i, Label::Safe, SUPERVISOR_SOURCE).expect("index in range");
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Smoke,
    PaperMini,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Profile> {
        match s {
            "smoke" => Ok(Profile::Smoke),
            "paper_mini" => Ok(Profile::PaperMini),
            other => Err(SynthError::UnknownProfile(other.to_string())),
        }
    }

    /// (training executions, seen-fault tests, novel-fault tests) per skill.
    fn counts(self, skill: Skill) -> (usize, usize, usize) {
        match self {
            Profile::Smoke => (2, 4, 2),
            Profile::PaperMini => match skill {
                Skill::PickPeg => (6, 30, 10),
                Skill::OpenDoor => (6, 30, 9),
                Skill::PlacePeg => (6, 30, 11),
            },
        }
    }
}

fn episode_seed(base: u64, skill: Skill, role: u64, idx: usize) -> u64 {
    noise_seed(base ^ ((skill as u64 + 1) << 40) ^ (role << 32), idx)
}

fn rotation_angle(rng: &mut ChaCha8Rng) -> f64 {
    // clearly misoriented pegs; small tilts are handled by the sweep
    (rng.gen_range(8..=15) * 5) as f64
}

fn varied(fault: &FaultSpec, rng: &mut ChaCha8Rng, n: usize) -> FaultSpec {
    match fault {
        FaultSpec::PegRotation { .. } => FaultSpec::PegRotation {
            angle: rotation_angle(rng),
        },
        FaultSpec::HandIntrusion { .. } => {
            let len = rng.gen_range(n / 8..n / 4);
            let start = rng.gen_range(0..n - len);
            FaultSpec::HandIntrusion {
                start_frame: start,
                end_frame: start + len,
            }
        }
        other => other.clone(),
    }
}

/// Episode ids sort demonstration first, then training executions in
/// order, then tests.
pub fn generate_suite(profile: Profile, seed: u64) -> Result<Vec<EpisodeRecord>> {
    let mut out = Vec::new();
    for skill in Skill::ALL {
        let (n_train, n_seen, n_novel) = profile.counts(skill);
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(seed, skill, 99, 0));
        let seen = skill.seen_faults();
        let mk = |role: u64, idx: usize| SceneParams::new(skill, episode_seed(seed, skill, role, idx));

        let demo = generate_episode(&mk(0, 0), &FaultSpec::None, &format!("{}_demo_00", skill.name()), Provenance::Demonstration)?;
        out.push(demo);

        // clean and faulty executions alternate early in id order
        let plan = [None, Some(0), None, Some(1), Some(2), Some(1)];
        for k in 0..n_train {
            let fault = match plan[k % plan.len()] {
                Some(j) => seen[j % seen.len()].clone(),
                None => FaultSpec::None,
            };
            let p = mk(1, k);
            let fault = varied(&fault, &mut rng, p.n_frames);
            let mut ep = generate_episode(&p, &fault, &format!("{}_train_{:02}", skill.name(), k + 1), Provenance::TrainingExecution)?;
            supervise(&mut ep, 4);
            out.push(ep);
        }

        for k in 0..n_seen {
            // one in five seen-fault tests runs clean
            let fault = if k % 5 == 4 {
                FaultSpec::None
            } else {
                seen[k % seen.len()].clone()
            };
            let p = mk(2, k);
            let fault = varied(&fault, &mut rng, p.n_frames);
            out.push(generate_episode(&p, &fault, &format!("{}_seen_{:02}", skill.name(), k + 1), Provenance::TestSeen)?);
        }

        for k in 0..n_novel {
            let base = if k % 2 == 0 {
                FaultSpec::HandIntrusion {
                    start_frame: 0,
                    end_frame: 1,
                }
            } else {
                FaultSpec::Clutter
            };
            let p = mk(3, k);
            let fault = varied(&base, &mut rng, p.n_frames);
            out.push(generate_episode(&p, &fault, &format!("{}_novel_{:02}", skill.name(), k + 1), Provenance::TestNovel)?);
        }
    }
    Ok(out)
}

pub const SWEEP_ANGLES: [f64; 13] = [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0, 50.0, 55.0, 60.0];

/// Pick-peg episodes identical except for the peg rotation.
pub fn rotation_sweep(seed: u64, angles: &[f64]) -> Result<Vec<EpisodeRecord>> {
    let p = SceneParams::new(Skill::PickPeg, seed);
    angles
        .iter()
        .map(|&a| {
            generate_episode(
                &p,
                &FaultSpec::PegRotation { angle: a },
                &format!("pick_peg_sweep_{:02}", a.round() as i64),
                Provenance::TestSeen,
            )
        })
        .collect()
}
