//! Deterministic toy egocentric world.
//!
//! A scene holds `K` coloured rectangles (object `j` has noun class `j`) and
//! one white "actor" rectangle moving at constant velocity toward a target
//! object. The observed clip is the first `T` frames; contact (first
//! positive-area overlap with the target) is scripted to happen after the
//! last observed frame, which gives exact noun, verb and time-to-contact
//! labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{BoundingBox, Detection, DetectionSet, Frame, StaAnnotation, VideoClip, Vocab};

const PLACEMENT_ATTEMPTS: usize = 200;
const TRAJECTORY_ATTEMPTS: usize = 500;
const BACKGROUND: [u8; 3] = [24, 24, 24];
const ACTOR_COLOR: [u8; 3] = [255, 255, 255];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// Low-resolution canvas `(height, width)`.
    pub low_res: (usize, usize),
    pub hi_res_multiplier: usize,
    pub num_objects: usize,
    /// Object side length range, low-res pixels.
    pub object_size: (f64, f64),
    pub actor_size: f64,
    /// Actor speed range, low-res pixels per frame.
    pub actor_speed: (f64, f64),
    pub fps: f64,
    pub frames: usize,
    /// Contact must happen within this many frames after the last observed one.
    pub max_future_frames: usize,
    /// Uniform detection box noise amplitude, low-res pixels.
    pub detection_jitter: f64,
    /// Probability of one spurious detection per frame.
    pub false_positive_rate: f64,
    /// Probability that a true object is missed in a frame.
    pub miss_rate: f64,
    pub seed: u64,
    pub vocab: Vocab,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            low_res: (32, 32),
            hi_res_multiplier: 2,
            num_objects: 3,
            object_size: (6.0, 10.0),
            actor_size: 4.0,
            actor_speed: (0.75, 1.5),
            fps: 4.0,
            frames: 8,
            max_future_frames: 8,
            detection_jitter: 0.0,
            false_positive_rate: 0.0,
            miss_rate: 0.0,
            seed: 0,
            vocab: Vocab::default(),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("world: {m}")));
        if self.num_objects < 1 {
            return fail("num_objects must be at least 1");
        }
        if self.num_objects > self.vocab.nouns {
            return fail("num_objects exceeds the noun vocabulary");
        }
        if !(self.actor_speed.0 > 0.0 && self.actor_speed.1 >= self.actor_speed.0) {
            return fail("actor speed range must be positive and ordered");
        }
        if !(self.detection_jitter >= 0.0) {
            return fail("detection jitter must be non-negative");
        }
        if self.hi_res_multiplier < 1 {
            return fail("hi-res multiplier must be at least 1");
        }
        if self.frames < 1 || self.max_future_frames < 1 {
            return fail("frames and max_future_frames must be at least 1");
        }
        if !(self.fps > 0.0) {
            return fail("fps must be positive");
        }
        let (h, w) = self.low_res;
        let side = self.object_size.1.max(self.actor_size);
        if !(self.object_size.0 > 0.0 && self.object_size.1 >= self.object_size.0) || side * 2.0 > h.min(w) as f64 {
            return fail("object sizes must be positive, ordered, and fit the canvas");
        }
        for p in [self.false_positive_rate, self.miss_rate] {
            if !(0.0..=1.0).contains(&p) {
                return fail("detector rates must lie in [0, 1]");
            }
        }
        Ok(())
    }

    pub fn hi_res(&self) -> (usize, usize) {
        (
            self.low_res.0 * self.hi_res_multiplier,
            self.low_res.1 * self.hi_res_multiplier,
        )
    }
}

/// Scripted scene geometry in low-res pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    /// Object boxes; object `j` has noun class `j`.
    pub objects: Vec<BoundingBox>,
    pub target: usize,
    pub actor_start: BoundingBox,
    pub velocity: (f64, f64),
    pub contact_frame: usize,
}

impl Scene {
    pub fn actor_at(&self, t: usize) -> BoundingBox {
        self.actor_start
            .translate(self.velocity.0 * t as f64, self.velocity.1 * t as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub clip_id: String,
    pub clip: VideoClip,
    pub detections: DetectionSet,
    pub annotation: StaAnnotation,
    pub scene: Scene,
}

/// Verb classes: dominant axis and sign of the actor velocity.
pub const VERB_NAMES: [&str; 4] = ["approach-right", "approach-left", "approach-down", "approach-up"];

pub fn verb_from_velocity((vx, vy): (f64, f64)) -> usize {
    if vx.abs() >= vy.abs() {
        if vx > 0.0 {
            0
        } else {
            1
        }
    } else if vy > 0.0 {
        2
    } else {
        3
    }
}

/// First frame at which the moving box overlaps `target` with positive area,
/// searched up to `max_frame` inclusive.
pub fn contact_frame(start: &BoundingBox, velocity: (f64, f64), target: &BoundingBox, max_frame: usize) -> Option<usize> {
    (0..=max_frame).find(|&t| {
        let b = start.translate(velocity.0 * t as f64, velocity.1 * t as f64);
        b.intersection_area(target) > 0.0
    })
}

/// Time from the last observed frame (`frames - 1`) to contact.
pub fn ttc_seconds(contact_frame: usize, frames: usize, fps: f64) -> f64 {
    (contact_frame as f64 - frames as f64 + 1.0) / fps
}

/// RGB colour of a noun class.
pub fn class_color(class: usize, classes: usize) -> [u8; 3] {
    let hue = (class as f64 / classes.max(1) as f64) * 6.0;
    let value = if class.is_multiple_of(2) { 1.0 } else { 0.65 };
    let sector = hue.floor() as usize % 6;
    let f = hue - hue.floor();
    let (p, q, t) = (0.0, value * (1.0 - f), value * f);
    let (r, g, b) = match sector {
        0 => (value, t, p),
        1 => (q, value, p),
        2 => (p, value, t),
        3 => (p, q, value),
        4 => (t, p, value),
        _ => (value, p, q),
    };
    [
        (r * 255.0).round() as u8,
        (g * 255.0).round() as u8,
        (b * 255.0).round() as u8,
    ]
}

fn paint(frame: &mut Frame, b: &BoundingBox, color: [u8; 3]) {
    let (h, w) = (frame.height, frame.width);
    for y in 0..h {
        let cy = y as f64 + 0.5;
        if cy < b.y1 || cy >= b.y2 {
            continue;
        }
        for x in 0..w {
            let cx = x as f64 + 0.5;
            if cx < b.x1 || cx >= b.x2 {
                continue;
            }
            for (c, &v) in color.iter().enumerate() {
                frame.pixels[(c * h + y) * w + x] = v as f64 / 255.0;
            }
        }
    }
}

/// Renders the scene at frame `t`, with boxes scaled by `scale`.
pub fn render(scene: &Scene, vocab: &Vocab, size: (usize, usize), scale: f64, t: usize) -> Frame {
    let (h, w) = size;
    let mut frame = Frame::zeros(3, h, w);
    for (plane, &v) in frame.pixels.chunks_mut(h * w).zip(&BACKGROUND) {
        plane.fill(v as f64 / 255.0);
    }
    for (j, obj) in scene.objects.iter().enumerate() {
        paint(&mut frame, &obj.scale(scale, scale), class_color(j, vocab.nouns));
    }
    paint(&mut frame, &scene.actor_at(t).scale(scale, scale), ACTOR_COLOR);
    frame
}

fn sample_rng(config: &WorldConfig, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    rng
}

fn place_objects(config: &WorldConfig, rng: &mut impl Rng) -> Option<Vec<BoundingBox>> {
    let (h, w) = (config.low_res.0 as f64, config.low_res.1 as f64);
    let mut objects: Vec<BoundingBox> = Vec::with_capacity(config.num_objects);
    for _ in 0..config.num_objects {
        let placed = (0..PLACEMENT_ATTEMPTS).find_map(|_| {
            let bw = rng.gen_range(config.object_size.0..=config.object_size.1).round();
            let bh = rng.gen_range(config.object_size.0..=config.object_size.1).round();
            let x = rng.gen_range(0.0..=(w - bw)).round();
            let y = rng.gen_range(0.0..=(h - bh)).round();
            let b = BoundingBox::new(x, y, x + bw, y + bh);
            // Keep a one-pixel gap between objects.
            let grown = BoundingBox::new(b.x1 - 1.0, b.y1 - 1.0, b.x2 + 1.0, b.y2 + 1.0);
            objects.iter().all(|o| o.intersection_area(&grown) == 0.0).then_some(b)
        })?;
        objects.push(placed);
    }
    Some(objects)
}

fn script_actor(
    config: &WorldConfig,
    objects: &[BoundingBox],
    target: usize,
    rng: &mut impl Rng,
) -> Option<(BoundingBox, (f64, f64), usize)> {
    let (h, w) = (config.low_res.0 as f64, config.low_res.1 as f64);
    let canvas = BoundingBox::new(0.0, 0.0, w, h);
    let s = config.actor_size;
    let last_observed = config.frames - 1;
    let horizon = last_observed + config.max_future_frames;
    let tgt = objects[target];
    let (tx, ty) = tgt.center();
    for _ in 0..TRAJECTORY_ATTEMPTS {
        let x = rng.gen_range(0.0..=(w - s));
        let y = rng.gen_range(0.0..=(h - s));
        let start = BoundingBox::new(x, y, x + s, y + s);
        let speed = rng.gen_range(config.actor_speed.0..=config.actor_speed.1);
        let (cx, cy) = start.center();
        let (dx, dy) = (tx - cx, ty - cy);
        let dist = (dx * dx + dy * dy).sqrt();
        if dist < 1e-6 {
            continue;
        }
        let v = (dx / dist * speed, dy / dist * speed);
        let Some(contact) = contact_frame(&start, v, &tgt, horizon) else {
            continue;
        };
        if contact <= last_observed {
            continue;
        }
        let at = |t: usize| start.translate(v.0 * t as f64, v.1 * t as f64);
        let visible = (0..=last_observed).all(|t| {
            let b = at(t);
            b.x1 >= canvas.x1 && b.y1 >= canvas.y1 && b.x2 <= canvas.x2 && b.y2 <= canvas.y2
        });
        let clear_path = (0..=contact).all(|t| {
            let b = at(t);
            objects
                .iter()
                .enumerate()
                .all(|(j, o)| j == target || o.intersection_area(&b) == 0.0)
        });
        if visible && clear_path {
            return Some((start, v, contact));
        }
    }
    None
}

fn jitter_box(b: &BoundingBox, amplitude: f64, rng: &mut impl Rng) -> BoundingBox {
    if amplitude == 0.0 {
        return *b;
    }
    let mut j = || rng.gen_range(-amplitude..=amplitude);
    let (x1, y1, x2, y2) = (b.x1 + j(), b.y1 + j(), b.x2 + j(), b.y2 + j());
    BoundingBox::new(x1.min(x2), y1.min(y2), x1.max(x2), y1.max(y2))
}

fn simulate_detector(config: &WorldConfig, scene: &Scene, rng: &mut impl Rng) -> DetectionSet {
    let m = config.hi_res_multiplier as f64;
    let (hh, hw) = config.hi_res();
    let size = (hh as f64, hw as f64);
    let amplitude = config.detection_jitter * m;
    let mut detections = Vec::new();
    let mut emit = |bbox: BoundingBox, class_id: usize, frame_index: usize, score: f64| {
        let bbox = bbox.clip(size);
        if bbox.width() >= 1.0 && bbox.height() >= 1.0 {
            detections.push(Detection {
                bbox,
                class_id,
                frame_index,
                score,
            });
        }
    };
    for t in 0..config.frames {
        for (j, obj) in scene.objects.iter().enumerate() {
            let missed = config.miss_rate > 0.0 && rng.gen_bool(config.miss_rate);
            let b = jitter_box(&obj.scale(m, m), amplitude, rng);
            let score = rng.gen_range(0.5..=1.0);
            if !missed {
                emit(b, j, t, score);
            }
        }
        let actor = jitter_box(&scene.actor_at(t).scale(m, m), amplitude, rng);
        let score = rng.gen_range(0.5..=1.0);
        emit(actor, config.vocab.actor_class(), t, score);
        if config.false_positive_rate > 0.0 && rng.gen_bool(config.false_positive_rate) {
            let side = rng.gen_range(config.object_size.0..=config.object_size.1) * m;
            let x = rng.gen_range(0.0..=(size.1 - side));
            let y = rng.gen_range(0.0..=(size.0 - side));
            let class = rng.gen_range(0..config.vocab.nouns);
            let score = rng.gen_range(0.3..=0.8);
            emit(BoundingBox::new(x, y, x + side, y + side), class, t, score);
        }
    }
    DetectionSet {
        detections,
        reference_size: size,
    }
}

pub fn clip_id(index: usize) -> String {
    format!("synth-{index:06}")
}

/// Generates sample `index`; deterministic in `(config.seed, index)`.
pub fn generate_sample(config: &WorldConfig, index: usize) -> Result<SyntheticSample> {
    config.validate()?;
    let mut rng = sample_rng(config, index);
    let target = index % config.num_objects;
    let mut scripted = None;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let Some(objects) = place_objects(config, &mut rng) else {
            continue;
        };
        if let Some(actor) = script_actor(config, &objects, target, &mut rng) {
            scripted = Some((objects, actor));
            break;
        }
    }
    let Some((objects, (actor_start, velocity, contact))) = scripted else {
        return Err(Error::Generation(format!(
            "sample {index}: no trajectory makes contact after the observed window; \
             widen the speed range or max_future_frames"
        )));
    };
    let scene = Scene {
        objects,
        target,
        actor_start,
        velocity,
        contact_frame: contact,
    };
    let m = config.hi_res_multiplier as f64;
    let frames = (0..config.frames)
        .map(|t| render(&scene, &config.vocab, config.low_res, 1.0, t))
        .collect();
    let last_frame_hi = render(&scene, &config.vocab, config.hi_res(), m, config.frames - 1);
    let detections = simulate_detector(config, &scene, &mut rng);
    let annotation = StaAnnotation {
        bbox: scene.objects[target].scale(m, m),
        noun_id: target,
        verb_id: verb_from_velocity(velocity),
        ttc_seconds: ttc_seconds(contact, config.frames, config.fps),
    };
    Ok(SyntheticSample {
        clip_id: clip_id(index),
        clip: VideoClip {
            frames,
            fps: config.fps,
            last_frame_hi,
        },
        detections,
        annotation,
        scene,
    })
}

pub fn generate_dataset(config: &WorldConfig, n: usize) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    (0..n).map(|i| generate_sample(config, i)).collect()
}

/// Same samples as [`generate_dataset`], produced on `threads` worker threads.
pub fn generate_dataset_parallel(config: &WorldConfig, n: usize, threads: usize) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    let threads = threads.clamp(1, n);
    let chunk = n.div_ceil(threads);
    std::thread::scope(|scope| {
        let workers: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|start| {
                scope.spawn(move || {
                    (start..(start + chunk).min(n))
                        .map(|i| generate_sample(config, i))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(n);
        for w in workers {
            for s in w.join().expect("generation worker panicked") {
                out.push(s?);
            }
        }
        Ok(out)
    })
}
