//! Scene generation for the three environments, plus per-step object jitter.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::kernels::{gradient_background, object_bound_radius, render_scene};
use crate::pomdp::{ObjectSpec, SceneSummary, ShapeKind, TaskLabel};

/// Hidden environment state: the rendered canvas plus the objects and label
/// it was rendered from.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub canvas: Array2<f64>,
    pub objects: Vec<ObjectSpec>,
    pub label: TaskLabel,
}

impl Scene {
    pub fn summary(&self) -> SceneSummary {
        SceneSummary {
            objects: self.objects.clone(),
            label: self.label,
        }
    }
}

/// Serializable scene description (canvas excluded; export it as PGM/PNG).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneExport {
    pub canvas_size: usize,
    pub objects: Vec<ObjectSpec>,
    pub label: TaskLabel,
}

pub const CIRCLE_SQUARE_CANVAS: usize = 28;
pub const CIRCLE_RADIUS: f64 = 5.0;
pub const SQUARE_HALF_SIDE: f64 = 4.5;

pub const COUNT_CANVAS: usize = 64;
pub const STAR_RADIUS: f64 = 7.0;
pub const COUNT_DISTRACTOR_CIRCLE_RADIUS: f64 = 5.0;
pub const COUNT_DISTRACTOR_SQUARE_HALF: f64 = 4.5;

pub const POSE_CANVAS: usize = 96;
pub const WRENCH_HALF_LENGTH: f64 = 22.0;

/// Margin-respecting uniform center placement for an object of bound radius
/// `r` on an `n × n` canvas.
fn uniform_center(rng: &mut ChaCha8Rng, n: usize, r: f64) -> (f64, f64) {
    let lo = r;
    let hi = (n as f64 - 1.0) - r;
    (
        rng.random_range(lo..=hi),
        rng.random_range(lo..=hi),
    )
}

fn boxes_disjoint(a: &ObjectSpec, b: &ObjectSpec, pad: f64) -> bool {
    let ra = object_bound_radius(a) + pad;
    let rb = object_bound_radius(b);
    let dy = (a.center.0 - b.center.0).abs();
    let dx = (a.center.1 - b.center.1).abs();
    dx > ra + rb || dy > ra + rb
}

/// Circle-Square: one white circle or square (equal probability) on a
/// gradient background pointing toward the object.
pub fn circle_square_render(rng: &mut ChaCha8Rng) -> Scene {
    let is_circle = rng.random::<f64>() < 0.5;
    let (kind, size) = if is_circle {
        (ShapeKind::Circle, CIRCLE_RADIUS)
    } else {
        (ShapeKind::Square, SQUARE_HALF_SIDE)
    };
    let center = uniform_center(rng, CIRCLE_SQUARE_CANVAS, size);
    let obj = ObjectSpec {
        kind,
        center,
        orientation: 0.0,
        size,
    };
    let canvas = render_scene(
        CIRCLE_SQUARE_CANVAS,
        std::slice::from_ref(&obj),
        gradient_background(CIRCLE_SQUARE_CANVAS, center),
    );
    Scene {
        canvas,
        objects: vec![obj],
        label: TaskLabel::Class(if is_circle { 0 } else { 1 }),
    }
}

const PLACEMENT_ATTEMPTS: usize = 200;

/// Star-counting scene: 1-3 identical stars among 3-5 distractor circles and
/// squares, pairwise non-overlapping bounding boxes, flat black background.
pub fn glimpse_count_generate(rng: &mut ChaCha8Rng) -> Scene {
    'scene: loop {
        let stars = rng.random_range(1..=3usize);
        let distractors = rng.random_range(3..=5usize);
        let mut objects: Vec<ObjectSpec> = Vec::with_capacity(stars + distractors);

        let place = |rng: &mut ChaCha8Rng,
                         objects: &mut Vec<ObjectSpec>,
                         kind: ShapeKind,
                         size: f64,
                         orientation: f64|
         -> bool {
            let bound = object_bound_radius(&ObjectSpec {
                kind,
                center: (0.0, 0.0),
                orientation,
                size,
            });
            for _ in 0..PLACEMENT_ATTEMPTS {
                let center = uniform_center(rng, COUNT_CANVAS, bound);
                let candidate = ObjectSpec {
                    kind,
                    center,
                    orientation,
                    size,
                };
                if objects.iter().all(|o| boxes_disjoint(o, &candidate, 1.0)) {
                    objects.push(candidate);
                    return true;
                }
            }
            false
        };

        for _ in 0..stars {
            // All stars share one sprite: same size, same initial orientation.
            if !place(rng, &mut objects, ShapeKind::Star, STAR_RADIUS, 0.0) {
                continue 'scene;
            }
        }
        for _ in 0..distractors {
            let (kind, size) = if rng.random::<f64>() < 0.5 {
                (ShapeKind::Circle, COUNT_DISTRACTOR_CIRCLE_RADIUS)
            } else {
                (ShapeKind::Square, COUNT_DISTRACTOR_SQUARE_HALF)
            };
            let orientation = if kind == ShapeKind::Square {
                rng.random_range(0.0..std::f64::consts::FRAC_PI_2)
            } else {
                0.0
            };
            if !place(rng, &mut objects, kind, size, orientation) {
                continue 'scene;
            }
        }

        let canvas = render_scene(COUNT_CANVAS, &objects, |_, _| 0.0);
        return Scene {
            canvas,
            objects,
            label: TaskLabel::Class(stars - 1),
        };
    }
}

/// Pose label for a wrench object on a canvas of side `n`: position
/// normalized to `[-1, 1]` about the canvas center, angle in `(-π, π]`.
pub fn wrench_label(obj: &ObjectSpec, n: usize) -> TaskLabel {
    let c = (n as f64 - 1.0) / 2.0;
    TaskLabel::Pose {
        x: (obj.center.1 - c) / c,
        y: (obj.center.0 - c) / c,
        theta: wrap_angle(obj.orientation),
    }
}

/// Wrap an angle into `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(std::f64::consts::TAU);
    if t > std::f64::consts::PI {
        t - std::f64::consts::TAU
    } else {
        t
    }
}

/// Render the single-wrench scene for a given object placement.
pub fn render_pose_scene(obj: ObjectSpec) -> Scene {
    let canvas = render_scene(POSE_CANVAS, std::slice::from_ref(&obj), |_, _| 0.0);
    let label = wrench_label(&obj, POSE_CANVAS);
    Scene {
        canvas,
        objects: vec![obj],
        label,
    }
}

/// Pose-estimation scene: one wrench at a uniformly random in-canvas pose.
pub fn glimpse_pose_generate(rng: &mut ChaCha8Rng) -> Scene {
    let bound = object_bound_radius(&ObjectSpec {
        kind: ShapeKind::Wrench,
        center: (0.0, 0.0),
        orientation: 0.0,
        size: WRENCH_HALF_LENGTH,
    });
    let center = uniform_center(rng, POSE_CANVAS, bound);
    // Uniform over (-π, π].
    let theta = std::f64::consts::PI - rng.random::<f64>() * std::f64::consts::TAU;
    render_pose_scene(ObjectSpec {
        kind: ShapeKind::Wrench,
        center,
        orientation: theta,
        size: WRENCH_HALF_LENGTH,
    })
}

/// Add Gaussian noise to a pose `(row, col, orientation)`.
pub fn object_jitter(
    pose: (f64, f64, f64),
    sigma_pos: f64,
    sigma_rot: f64,
    rng: &mut ChaCha8Rng,
) -> (f64, f64, f64) {
    assert!(sigma_pos >= 0.0 && sigma_rot >= 0.0);
    let (row, col, theta) = pose;
    if sigma_pos == 0.0 && sigma_rot == 0.0 {
        return pose;
    }
    let pos = Normal::new(0.0, sigma_pos.max(f64::MIN_POSITIVE)).unwrap();
    let rot = Normal::new(0.0, sigma_rot.max(f64::MIN_POSITIVE)).unwrap();
    let dr = if sigma_pos > 0.0 { pos.sample(rng) } else { 0.0 };
    let dc = if sigma_pos > 0.0 { pos.sample(rng) } else { 0.0 };
    let dt = if sigma_rot > 0.0 { rot.sample(rng) } else { 0.0 };
    (row + dr, col + dc, theta + dt)
}

/// Jitter every object in the scene, clamp them back inside the canvas, and
/// re-render. The label is refreshed from the moved objects.
pub fn evolve_scene(
    scene: &mut Scene,
    n: usize,
    sigma_pos: f64,
    sigma_rot: f64,
    gradient: bool,
    rng: &mut ChaCha8Rng,
) {
    if sigma_pos == 0.0 && sigma_rot == 0.0 {
        return;
    }
    for obj in &mut scene.objects {
        let (r, c, t) = object_jitter(
            (obj.center.0, obj.center.1, obj.orientation),
            sigma_pos,
            sigma_rot,
            rng,
        );
        let bound = object_bound_radius(obj);
        let hi = (n as f64 - 1.0) - bound;
        obj.center = (r.clamp(bound, hi), c.clamp(bound, hi));
        obj.orientation = wrap_angle(t);
    }
    scene.canvas = if gradient {
        render_scene(n, &scene.objects, gradient_background(n, scene.objects[0].center))
    } else {
        render_scene(n, &scene.objects, |_, _| 0.0)
    };
    if scene.objects.len() == 1 && scene.objects[0].kind == ShapeKind::Wrench {
        scene.label = wrench_label(&scene.objects[0], n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn circle_square_center_pixel_is_object() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let scene = circle_square_render(&mut rng);
            let (cy, cx) = scene.objects[0].center;
            assert_eq!(scene.canvas[[cy.round() as usize, cx.round() as usize]], 1.0);
        }
    }

    #[test]
    fn circle_square_gradient_monotone_near_object() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scene = circle_square_render(&mut rng);
        let (cy, cx) = scene.objects[0].center;
        // A background pixel adjacent to the object vs the farthest corner.
        let r = object_bound_radius(&scene.objects[0]);
        let near = (
            (cy + r + 1.5).clamp(0.0, 27.0) as usize,
            cx.round().clamp(0.0, 27.0) as usize,
        );
        let corners = [(0usize, 0usize), (0, 27), (27, 0), (27, 27)];
        let far = corners
            .into_iter()
            .max_by(|a, b| {
                let da = (a.0 as f64 - cy).hypot(a.1 as f64 - cx);
                let db = (b.0 as f64 - cy).hypot(b.1 as f64 - cx);
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        assert!(scene.canvas[[near.0, near.1]] > scene.canvas[[far.0, far.1]]);
    }

    #[test]
    fn circle_square_class_prior_is_half() {
        let mut circles = 0usize;
        for seed in 0..10_000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scene = circle_square_render(&mut rng);
            if scene.label == TaskLabel::Class(0) {
                circles += 1;
            }
        }
        let freq = circles as f64 / 10_000.0;
        assert!((freq - 0.5).abs() <= 0.02, "circle frequency {freq}");
    }

    #[test]
    fn circle_square_object_inside_canvas() {
        for seed in 0..200u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scene = circle_square_render(&mut rng);
            let o = &scene.objects[0];
            // Axis-aligned, so the bounding box extends `size` per axis.
            let r = o.size;
            assert!(o.center.0 >= r && o.center.0 <= 27.0 - r);
            assert!(o.center.1 >= r && o.center.1 <= 27.0 - r);
        }
    }

    #[test]
    fn count_labels_uniform() {
        let mut counts = [0usize; 3];
        for seed in 0..10_000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scene = glimpse_count_generate(&mut rng);
            match scene.label {
                TaskLabel::Class(k) => counts[k] += 1,
                _ => panic!("count scene must have a class label"),
            }
        }
        for k in 0..3 {
            let freq = counts[k] as f64 / 10_000.0;
            assert!(
                (freq - 1.0 / 3.0).abs() <= 0.02,
                "count {} frequency {freq}",
                k + 1
            );
        }
    }

    #[test]
    fn count_boxes_disjoint() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scene = glimpse_count_generate(&mut rng);
            for i in 0..scene.objects.len() {
                for j in (i + 1)..scene.objects.len() {
                    assert!(
                        boxes_disjoint(&scene.objects[i], &scene.objects[j], 0.0),
                        "seed {seed}: objects {i} and {j} overlap"
                    );
                }
            }
        }
    }

    #[test]
    fn count_deterministic() {
        let a = glimpse_count_generate(&mut ChaCha8Rng::seed_from_u64(99));
        let b = glimpse_count_generate(&mut ChaCha8Rng::seed_from_u64(99));
        assert_eq!(a, b);
    }

    #[test]
    fn pose_scene_matches_label_rerender() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scene = glimpse_pose_generate(&mut rng);
            let TaskLabel::Pose { x, y, theta } = scene.label else {
                panic!("pose label expected")
            };
            let c = (POSE_CANVAS as f64 - 1.0) / 2.0;
            let rebuilt = render_pose_scene(ObjectSpec {
                kind: ShapeKind::Wrench,
                center: (y * c + c, x * c + c),
                orientation: theta,
                size: WRENCH_HALF_LENGTH,
            });
            assert_eq!(scene.canvas, rebuilt.canvas, "seed {seed}");
        }
    }

    #[test]
    fn pose_theta_marginal_uniform() {
        let n = 10_000;
        let mut thetas: Vec<f64> = (0..n)
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                match glimpse_pose_generate(&mut rng).label {
                    TaskLabel::Pose { theta, .. } => theta,
                    _ => unreachable!(),
                }
            })
            .collect();
        thetas.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // KS statistic against Uniform(-π, π].
        let mut ks: f64 = 0.0;
        for (i, t) in thetas.iter().enumerate() {
            let cdf = (t + std::f64::consts::PI) / std::f64::consts::TAU;
            let emp_hi = (i + 1) as f64 / n as f64;
            let emp_lo = i as f64 / n as f64;
            ks = ks.max((cdf - emp_lo).abs()).max((emp_hi - cdf).abs());
        }
        assert!(ks <= 0.02, "KS statistic {ks}");
    }

    #[test]
    fn wrench_handle_patch_ambiguous_under_end_swap() {
        use crate::envs::kernels::{bilinear_glimpse, GlimpseWindow};
        // Two poses sharing a center but with swapped ends. A glimpse on the
        // handle interior cannot tell them apart; only the jaw region differs.
        let center = (48.0, 48.0);
        let theta = 0.37;
        let a = render_pose_scene(ObjectSpec {
            kind: ShapeKind::Wrench,
            center,
            orientation: theta,
            size: WRENCH_HALF_LENGTH,
        });
        let b = render_pose_scene(ObjectSpec {
            kind: ShapeKind::Wrench,
            center,
            orientation: wrap_angle(theta + std::f64::consts::PI),
            size: WRENCH_HALF_LENGTH,
        });
        let w = GlimpseWindow {
            center,
            size: 9,
        };
        let pa = bilinear_glimpse(&a.canvas, w);
        let pb = bilinear_glimpse(&b.canvas, w);
        let max_diff = pa
            .iter()
            .zip(pb.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff <= 1e-12, "handle patches differ by {max_diff}");
        // And the canvases as a whole do differ (the jaw moved ends).
        assert_ne!(a.canvas, b.canvas);
    }

    #[test]
    fn jitter_zero_sigma_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pose = (10.0, 20.0, 0.5);
        assert_eq!(object_jitter(pose, 0.0, 0.0, &mut rng), pose);
    }

    #[test]
    fn jitter_std_matches_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let sigma = 0.5;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let (r, _, _) = object_jitter((0.0, 0.0, 0.0), sigma, 0.01, &mut rng);
            sum += r;
            sq += r * r;
        }
        let mean = sum / n as f64;
        let std = (sq / n as f64 - mean * mean).sqrt();
        assert!((std - sigma).abs() / sigma <= 0.03, "empirical std {std}");
    }

    #[test]
    fn evolve_updates_pose_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut scene = glimpse_pose_generate(&mut rng);
        let before = scene.label;
        evolve_scene(&mut scene, POSE_CANVAS, 0.5, 0.01, false, &mut rng);
        let after = scene.label;
        assert_ne!(before, after);
        // The refreshed label matches the moved object exactly.
        assert_eq!(after, wrench_label(&scene.objects[0], POSE_CANVAS));
    }

    #[test]
    fn wrap_angle_range() {
        for t in [-10.0, -3.15, 0.0, 3.15, 10.0, std::f64::consts::PI] {
            let w = wrap_angle(t);
            assert!(w > -std::f64::consts::PI - 1e-12 && w <= std::f64::consts::PI + 1e-12);
        }
        assert_eq!(wrap_angle(std::f64::consts::PI), std::f64::consts::PI);
    }
}
