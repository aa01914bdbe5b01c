//! Static and kinematic colliders described by analytic signed distance functions.
//!
//! Every shape is defined in its own local frame and placed in the world by a
//! rigid [`Pose`]. Distances are negative inside solid material.

use nalgebra::{Point3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::SimError;

/// Rigid transform from a collider's local frame to the world frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "PoseRepr", into = "PoseRepr")]
pub struct Pose {
    pub position: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            position: Vector3::zeros(),
            rotation: UnitQuaternion::identity(),
        }
    }

    pub fn from_translation(position: Vector3<f64>) -> Self {
        Pose {
            position,
            rotation: UnitQuaternion::identity(),
        }
    }

    pub fn new(position: Vector3<f64>, rotation: UnitQuaternion<f64>) -> Self {
        Pose { position, rotation }
    }

    pub fn to_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse_transform_vector(&(p - self.position))
    }

    pub fn to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.position
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseRepr {
    position: [f64; 3],
    /// Quaternion as `[w, x, y, z]`.
    rotation: [f64; 4],
}

impl From<PoseRepr> for Pose {
    fn from(r: PoseRepr) -> Self {
        let [w, i, j, k] = r.rotation;
        Pose {
            position: Vector3::from(r.position),
            rotation: UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, i, j, k)),
        }
    }
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        let q = p.rotation.quaternion();
        PoseRepr {
            position: p.position.into(),
            rotation: [q.w, q.i, q.j, q.k],
        }
    }
}

/// Collider geometry. All dimensions are metres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", content = "dimensions", rename_all = "snake_case")]
pub enum Shape {
    /// Solid half-space below the local `z = 0` plane.
    Plane {},
    /// Thin-walled truncated cone with its exit at local `z = 0`, widening
    /// upward, topped by a vertical collar. A gate disc closes the exit.
    Funnel {
        exit_radius: f64,
        top_radius: f64,
        cone_height: f64,
        collar_height: f64,
        wall_thickness: f64,
    },
    /// Solid cylinder centred on the origin with its axis along local `z`.
    Cylinder { radius: f64, half_height: f64 },
    /// Open-top box. The interior spans `x ∈ [-length/2, length/2]`,
    /// `y ∈ [-width/2, width/2]`, `z ∈ [0, height]`; floor and walls are
    /// `wall_thickness` thick and lie outside the interior.
    OpenBox {
        length: f64,
        width: f64,
        height: f64,
        wall_thickness: f64,
    },
    /// [`Shape::OpenBox`] whose `+x` wall is only `lip_height` tall.
    Scoop {
        length: f64,
        width: f64,
        height: f64,
        lip_height: f64,
        wall_thickness: f64,
    },
}

impl Shape {
    pub fn kind(&self) -> &'static str {
        match self {
            Shape::Plane {} => "plane",
            Shape::Funnel { .. } => "funnel",
            Shape::Cylinder { .. } => "cylinder",
            Shape::OpenBox { .. } => "open_box",
            Shape::Scoop { .. } => "scoop",
        }
    }

    fn dimensions(&self) -> Vec<(&'static str, f64)> {
        match *self {
            Shape::Plane {} => vec![],
            Shape::Funnel {
                exit_radius,
                top_radius,
                cone_height,
                collar_height,
                wall_thickness,
            } => vec![
                ("exit_radius", exit_radius),
                ("top_radius", top_radius),
                ("cone_height", cone_height),
                ("collar_height", collar_height),
                ("wall_thickness", wall_thickness),
            ],
            Shape::Cylinder {
                radius,
                half_height,
            } => vec![("radius", radius), ("half_height", half_height)],
            Shape::OpenBox {
                length,
                width,
                height,
                wall_thickness,
            } => vec![
                ("length", length),
                ("width", width),
                ("height", height),
                ("wall_thickness", wall_thickness),
            ],
            Shape::Scoop {
                length,
                width,
                height,
                lip_height,
                wall_thickness,
            } => vec![
                ("length", length),
                ("width", width),
                ("height", height),
                ("lip_height", lip_height),
                ("wall_thickness", wall_thickness),
            ],
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for (name, v) in self.dimensions() {
            if !(v.is_finite() && v > 0.0) {
                return Err(SimError::InvalidShape(format!(
                    "{} dimension {name} must be positive, got {v}",
                    self.kind()
                )));
            }
        }
        if let Shape::Scoop { height, lip_height, .. } = *self {
            if lip_height > height {
                return Err(SimError::InvalidShape(format!(
                    "scoop lip {lip_height} taller than its walls {height}"
                )));
            }
        }
        Ok(())
    }

    /// Radius of a local-origin sphere enclosing the solid, `None` if unbounded.
    fn bounding_radius(&self) -> Option<f64> {
        match *self {
            Shape::Plane {} => None,
            Shape::Funnel {
                top_radius,
                cone_height,
                collar_height,
                wall_thickness,
                exit_radius,
            } => {
                let r = top_radius.max(exit_radius) + wall_thickness;
                let h = cone_height + collar_height + wall_thickness;
                Some((r * r + h * h).sqrt())
            }
            Shape::Cylinder {
                radius,
                half_height,
            } => Some((radius * radius + half_height * half_height).sqrt()),
            Shape::OpenBox {
                length,
                width,
                height,
                wall_thickness,
            } => {
                let hx = 0.5 * length + wall_thickness;
                let hy = 0.5 * width + wall_thickness;
                let hz = height.max(wall_thickness);
                Some((hx * hx + hy * hy + hz * hz).sqrt())
            }
            Shape::Scoop {
                length,
                width,
                height,
                wall_thickness,
                ..
            } => Shape::OpenBox {
                length,
                width,
                height,
                wall_thickness,
            }
            .bounding_radius(),
        }
    }

    /// Signed distance and outward unit gradient in the local frame.
    pub fn sdf_local(&self, p: &Vector3<f64>, gate_open: bool) -> (f64, Vector3<f64>) {
        match *self {
            Shape::Plane {} => (p.z, Vector3::z()),
            Shape::Funnel {
                exit_radius,
                top_radius,
                cone_height,
                collar_height,
                wall_thickness,
            } => {
                let (rho, radial) = meridian(p);
                let q = Vector2::new(rho, p.z);
                let a = Vector2::new(exit_radius, 0.0);
                let b = Vector2::new(top_radius, cone_height);
                let c = Vector2::new(top_radius, cone_height + collar_height);
                let (d1, g1) = segment_distance(&q, &a, &b);
                let (d2, g2) = segment_distance(&q, &b, &c);
                let (d, g) = if d1 <= d2 { (d1, g1) } else { (d2, g2) };
                let shell = (d - 0.5 * wall_thickness, lift(&g, &radial));
                if gate_open {
                    return shell;
                }
                let gate = cylinder_sdf(
                    rho,
                    p.z + 0.5 * wall_thickness,
                    exit_radius + wall_thickness,
                    0.5 * wall_thickness,
                );
                let gate = (gate.0, lift(&gate.1, &radial));
                if gate.0 < shell.0 {
                    gate
                } else {
                    shell
                }
            }
            Shape::Cylinder {
                radius,
                half_height,
            } => {
                let (rho, radial) = meridian(p);
                let (d, g) = cylinder_sdf(rho, p.z, radius, half_height);
                (d, lift(&g, &radial))
            }
            Shape::OpenBox {
                length,
                width,
                height,
                wall_thickness,
            } => open_box_sdf(p, length, width, height, height, wall_thickness),
            Shape::Scoop {
                length,
                width,
                height,
                lip_height,
                wall_thickness,
            } => open_box_sdf(p, length, width, height, lip_height, wall_thickness),
        }
    }
}

fn open_box_sdf(p: &Vector3<f64>, length: f64, width: f64, height: f64, front: f64, t: f64) -> (f64, Vector3<f64>) {
    let hx = 0.5 * length;
    let hy = 0.5 * width;
    let zc = 0.5 * (height - t);
    let hz = 0.5 * (height + t);
    let slabs = [
        // floor
        (Vector3::new(0.0, 0.0, -0.5 * t), Vector3::new(hx + t, hy + t, 0.5 * t)),
        // -x / +x walls
        (Vector3::new(-hx - 0.5 * t, 0.0, zc), Vector3::new(0.5 * t, hy + t, hz)),
        (
            Vector3::new(hx + 0.5 * t, 0.0, 0.5 * (front - t)),
            Vector3::new(0.5 * t, hy + t, 0.5 * (front + t)),
        ),
        // -y / +y walls
        (Vector3::new(0.0, -hy - 0.5 * t, zc), Vector3::new(hx, 0.5 * t, hz)),
        (Vector3::new(0.0, hy + 0.5 * t, zc), Vector3::new(hx, 0.5 * t, hz)),
    ];
    let mut best = (f64::INFINITY, Vector3::z());
    for (c, h) in slabs {
        let s = box_sdf(&(p - c), &h);
        if s.0 < best.0 {
            best = s;
        }
    }
    best
}

fn meridian(p: &Vector3<f64>) -> (f64, Vector2<f64>) {
    let rho = (p.x * p.x + p.y * p.y).sqrt();
    let radial = if rho > 1e-12 {
        Vector2::new(p.x / rho, p.y / rho)
    } else {
        Vector2::new(1.0, 0.0)
    };
    (rho, radial)
}

/// Maps a gradient in the `(rho, z)` half-plane back to 3-D.
fn lift(g: &Vector2<f64>, radial: &Vector2<f64>) -> Vector3<f64> {
    Vector3::new(g.x * radial.x, g.x * radial.y, g.y)
}

fn segment_distance(q: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> (f64, Vector2<f64>) {
    let ab = b - a;
    let t = ((q - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    let diff = q - (a + ab * t);
    let d = diff.norm();
    if d > 1e-15 {
        (d, diff / d)
    } else {
        // On the segment: pick the normal pointing towards the axis side.
        let n = Vector2::new(-ab.y, ab.x).normalize();
        (0.0, n)
    }
}

fn cylinder_sdf(rho: f64, z: f64, radius: f64, half_height: f64) -> (f64, Vector2<f64>) {
    let dx = rho - radius;
    let dz = z.abs() - half_height;
    let sz = if z >= 0.0 { 1.0 } else { -1.0 };
    if dx > 0.0 || dz > 0.0 {
        let ox = dx.max(0.0);
        let oz = dz.max(0.0);
        let len = (ox * ox + oz * oz).sqrt();
        (len, Vector2::new(ox / len, sz * oz / len))
    } else if dx > dz {
        (dx, Vector2::new(1.0, 0.0))
    } else {
        (dz, Vector2::new(0.0, sz))
    }
}

fn box_sdf(p: &Vector3<f64>, h: &Vector3<f64>) -> (f64, Vector3<f64>) {
    let sign = p.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
    let q = p.abs() - h;
    let outside = q.map(|v| v.max(0.0));
    let len = outside.norm();
    if len > 0.0 {
        (len, outside.component_mul(&sign) / len)
    } else {
        let axis = q.imax();
        let mut g = Vector3::zeros();
        g[axis] = sign[axis];
        (q[axis], g)
    }
}

/// A placed shape, possibly moving between steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Collider {
    #[serde(flatten)]
    pub shape: Shape,
    pub pose: Pose,
    /// Only meaningful for funnels: an open gate removes the exit disc.
    #[serde(default)]
    pub gate_open: bool,
    #[serde(skip)]
    prev_pose: Option<Pose>,
}

impl Collider {
    pub fn new(shape: Shape, pose: Pose) -> Result<Self, SimError> {
        shape.validate()?;
        Ok(Collider {
            shape,
            pose,
            gate_open: false,
            prev_pose: None,
        })
    }

    /// Moves the collider; the displacement is used for contact friction
    /// during the next step.
    pub fn set_pose(&mut self, pose: Pose) {
        if self.prev_pose.is_none() {
            self.prev_pose = Some(self.pose);
        }
        self.pose = pose;
    }

    /// Forgets accumulated motion; called at the end of every step.
    pub(crate) fn end_step(&mut self) {
        self.prev_pose = None;
    }

    /// World-frame signed distance and outward unit normal.
    pub fn sdf(&self, p: &Vector3<f64>) -> (f64, Vector3<f64>) {
        let local = self.pose.to_local(p);
        let (d, g) = self.shape.sdf_local(&local, self.gate_open);
        (d, self.pose.rotation * g)
    }

    /// Displacement of the collider's material point at `p` since the
    /// start of the current step.
    pub fn surface_displacement(&self, p: &Vector3<f64>) -> Vector3<f64> {
        match &self.prev_pose {
            None => Vector3::zeros(),
            Some(prev) => p - prev.to_world(&self.pose.to_local(p)),
        }
    }

    /// Conservative rejection test: `true` when `p` is certainly farther than
    /// `margin` from the solid.
    pub fn far_from(&self, p: &Vector3<f64>, margin: f64) -> bool {
        match self.shape.bounding_radius() {
            None => false,
            Some(r) => (p - self.pose.position).norm_squared() > (r + margin) * (r + margin),
        }
    }

    pub fn is_funnel(&self) -> bool {
        matches!(self.shape, Shape::Funnel { .. })
    }

    /// World-space point at the centre of the funnel exit.
    pub fn funnel_tip(&self) -> Option<Point3<f64>> {
        self.is_funnel().then(|| Point3::from(self.pose.position))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn shapes() -> Vec<Collider> {
        let rot = UnitQuaternion::from_euler_angles(0.3, -0.2, 0.7);
        vec![
            Collider::new(Shape::Plane {}, Pose::new(Vector3::new(0.0, 0.0, 0.1), rot)).unwrap(),
            Collider::new(
                Shape::Funnel {
                    exit_radius: 0.03,
                    top_radius: 0.1,
                    cone_height: 0.1,
                    collar_height: 0.1,
                    wall_thickness: 0.004,
                },
                Pose::from_translation(Vector3::new(0.0, 0.0, 0.2)),
            )
            .unwrap(),
            Collider::new(
                Shape::Cylinder {
                    radius: 0.1,
                    half_height: 0.02,
                },
                Pose::new(Vector3::new(0.01, 0.0, -0.02), rot),
            )
            .unwrap(),
            Collider::new(
                Shape::OpenBox {
                    length: 0.3,
                    width: 0.1,
                    height: 0.08,
                    wall_thickness: 0.01,
                },
                Pose::new(Vector3::new(0.0, 0.05, 0.0), rot),
            )
            .unwrap(),
            Collider::new(
                Shape::Scoop {
                    length: 0.3,
                    width: 0.1,
                    height: 0.08,
                    lip_height: 0.03,
                    wall_thickness: 0.01,
                },
                Pose::new(Vector3::new(0.0, 0.05, 0.0), rot),
            )
            .unwrap(),
        ]
    }

    #[test]
    fn rejects_non_positive_dimensions() {
        let bad = Shape::Cylinder {
            radius: 0.0,
            half_height: 1.0,
        };
        assert!(Collider::new(bad, Pose::identity()).is_err());
    }

    #[test]
    fn plane_distance_is_height() {
        let c = Collider::new(Shape::Plane {}, Pose::identity()).unwrap();
        let (d, n) = c.sdf(&Vector3::new(1.0, 2.0, 0.25));
        assert_eq!(d, 0.25);
        assert_eq!(n, Vector3::z());
    }

    #[test]
    fn open_box_interior_and_walls() {
        let c = Collider::new(
            Shape::OpenBox {
                length: 0.2,
                width: 0.2,
                height: 0.1,
                wall_thickness: 0.01,
            },
            Pose::identity(),
        )
        .unwrap();
        // Above the floor at the centre: distance to floor top.
        let (d, n) = c.sdf(&Vector3::new(0.0, 0.0, 0.03));
        assert!((d - 0.03).abs() < 1e-12);
        assert!((n - Vector3::z()).norm() < 1e-12);
        // Inside the +x wall.
        let (d, _) = c.sdf(&Vector3::new(0.105, 0.0, 0.05));
        assert!(d < 0.0);
    }

    #[test]
    fn scoop_lip_is_lower_than_its_walls() {
        let c = Collider::new(
            Shape::Scoop {
                length: 0.2,
                width: 0.2,
                height: 0.1,
                lip_height: 0.04,
                wall_thickness: 0.01,
            },
            Pose::identity(),
        )
        .unwrap();
        // above the lip, beside the front wall
        let (d, n) = c.sdf(&Vector3::new(0.105, 0.0, 0.06));
        assert!((d - 0.02).abs() < 1e-12);
        assert!((n - Vector3::z()).norm() < 1e-12);
        // the back wall at the same height is solid
        assert!(c.sdf(&Vector3::new(-0.105, 0.0, 0.06)).0 < 0.0);
        let bad = Shape::Scoop {
            length: 0.2,
            width: 0.2,
            height: 0.1,
            lip_height: 0.2,
            wall_thickness: 0.01,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn closed_gate_blocks_exit_open_gate_does_not() {
        let mut c = shapes()[1].clone();
        let below_exit = Vector3::new(0.0, 0.0, 0.2 + 0.001);
        assert!(c.sdf(&below_exit).0 < 0.01);
        c.gate_open = true;
        assert!(c.sdf(&below_exit).0 > 0.02);
    }

    #[test]
    fn normals_match_finite_differences() {
        let h = 1e-7;
        let pts = [
            Vector3::new(0.05, 0.02, 0.21),
            Vector3::new(0.12, -0.03, 0.35),
            Vector3::new(0.02, 0.01, 0.05),
            Vector3::new(-0.2, 0.1, 0.0),
        ];
        for c in shapes() {
            for p in &pts {
                let (_, n) = c.sdf(p);
                let mut fd = Vector3::zeros();
                for k in 0..3 {
                    let mut e = Vector3::zeros();
                    e[k] = h;
                    fd[k] = (c.sdf(&(p + e)).0 - c.sdf(&(p - e)).0) / (2.0 * h);
                }
                assert!((fd - n).norm() < 1e-5, "{} at {p:?}: {n:?} vs {fd:?}", c.shape.kind());
            }
        }
    }

    #[test]
    fn scene_json_round_trip() {
        let scene = shapes();
        let s = serde_json::to_string(&scene).unwrap();
        assert!(s.contains("\"shape\":\"funnel\""));
        assert!(s.contains("\"dimensions\""));
        let back: Vec<Collider> = serde_json::from_str(&s).unwrap();
        for (a, b) in scene.iter().zip(&back) {
            assert_eq!(a.shape, b.shape);
            assert!((a.pose.position - b.pose.position).norm() < 1e-15);
            assert!(a.pose.rotation.angle_to(&b.pose.rotation) < 1e-12);
        }
    }

    #[test]
    fn moving_collider_reports_surface_displacement() {
        let mut c = Collider::new(Shape::Plane {}, Pose::identity()).unwrap();
        c.set_pose(Pose::from_translation(Vector3::new(0.01, 0.0, 0.0)));
        let d = c.surface_displacement(&Vector3::new(0.3, 0.2, 0.0));
        assert!((d - Vector3::new(0.01, 0.0, 0.0)).norm() < 1e-15);
        c.end_step();
        assert_eq!(c.surface_displacement(&Vector3::zeros()), Vector3::zeros());
    }

    proptest! {
        // Continuity across the surface: every distance field is 1-Lipschitz.
        #[test]
        fn sdf_is_lipschitz(
            x in -0.25f64..0.25, y in -0.25f64..0.25, z in -0.1f64..0.45,
            dx in -0.01f64..0.01, dy in -0.01f64..0.01, dz in -0.01f64..0.01,
        ) {
            let p = Vector3::new(x, y, z);
            let q = p + Vector3::new(dx, dy, dz);
            for c in shapes() {
                let (a, _) = c.sdf(&p);
                let (b, _) = c.sdf(&q);
                prop_assert!((a - b).abs() <= (p - q).norm() + 1e-12);
            }
        }
    }
}
