use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// Primitive geometry in its local frame; cylinders run along local z, or
/// local x when lying.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    Box { size: [f64; 3] },
    Cylinder { radius: f64, height: f64 },
    Sphere { radius: f64 },
}

/// A shape placed at `position` (its centre) with a rotation `yaw` about the
/// vertical axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(flatten)]
    pub shape: Shape,
    pub position: [f64; 3],
    pub yaw: f64,
    #[serde(default)]
    pub lying: bool,
}

/// Chord of a line through a convex primitive: entry/exit parameters and the
/// outward normals there, in world coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Chord {
    pub enter: f64,
    pub exit: f64,
    pub enter_normal: Vector3<f64>,
    pub exit_normal: Vector3<f64>,
}

fn length(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl Primitive {
    /// Vertical extent of the shape as placed.
    pub fn height(&self) -> f64 {
        match self.shape {
            Shape::Box { size } => size[2],
            Shape::Cylinder { radius, height } => {
                if self.lying {
                    2.0 * radius
                } else {
                    height
                }
            }
            Shape::Sphere { radius } => 2.0 * radius,
        }
    }

    /// Radius of the vertical cylinder enclosing the footprint.
    pub fn footprint_radius(&self) -> f64 {
        match self.shape {
            Shape::Box { size } => 0.5 * (size[0] * size[0] + size[1] * size[1]).sqrt(),
            Shape::Cylinder { radius, height } => {
                if self.lying {
                    (radius * radius + 0.25 * height * height).sqrt()
                } else {
                    radius
                }
            }
            Shape::Sphere { radius } => radius,
        }
    }

    pub fn bounding_radius(&self) -> f64 {
        match self.shape {
            Shape::Box { size } => 0.5 * length(&size),
            Shape::Cylinder { radius, height } => (radius * radius + 0.25 * height * height).sqrt(),
            Shape::Sphere { radius } => radius,
        }
    }

    fn yaw_cs(&self) -> (f64, f64) {
        (self.yaw.cos(), self.yaw.sin())
    }

    /// Local axis `k` expressed in world coordinates.
    pub fn axis(&self, k: usize) -> Vector3<f64> {
        let (c, s) = self.yaw_cs();
        match k {
            0 => Vector3::new(c, s, 0.0),
            1 => Vector3::new(-s, c, 0.0),
            _ => Vector3::z(),
        }
    }

    /// Index of the local axis a cylinder runs along.
    pub fn cylinder_axis(&self) -> usize {
        if self.lying {
            0
        } else {
            2
        }
    }

    pub fn to_local(&self, p: Vector3<f64>) -> Vector3<f64> {
        let d = p - Vector3::from(self.position);
        let (c, s) = self.yaw_cs();
        Vector3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    pub fn dir_to_local(&self, v: Vector3<f64>) -> Vector3<f64> {
        let (c, s) = self.yaw_cs();
        Vector3::new(c * v.x + s * v.y, -s * v.x + c * v.y, v.z)
    }

    pub fn dir_to_world(&self, v: Vector3<f64>) -> Vector3<f64> {
        let (c, s) = self.yaw_cs();
        Vector3::new(c * v.x - s * v.y, s * v.x + c * v.y, v.z)
    }

    pub fn to_world(&self, l: Vector3<f64>) -> Vector3<f64> {
        self.dir_to_world(l) + Vector3::from(self.position)
    }

    /// Signed distance, negative inside.
    pub fn sdf(&self, p: Vector3<f64>) -> f64 {
        let l = self.to_local(p);
        match self.shape {
            Shape::Box { size } => {
                let q = [l.x.abs() - size[0] / 2.0, l.y.abs() - size[1] / 2.0, l.z.abs() - size[2] / 2.0];
                let outside = length(&q.map(|v| v.max(0.0)));
                outside + q[0].max(q[1]).max(q[2]).min(0.0)
            }
            Shape::Cylinder { radius, height } => {
                let (along, r) = if self.lying {
                    (l.x, (l.y * l.y + l.z * l.z).sqrt())
                } else {
                    (l.z, (l.x * l.x + l.y * l.y).sqrt())
                };
                let d = [r - radius, along.abs() - height / 2.0];
                d[0].max(d[1]).min(0.0) + length(&d.map(|v| v.max(0.0)))
            }
            Shape::Sphere { radius } => l.norm() - radius,
        }
    }

    /// Intersection of the line `origin + s·dir` (unit `dir`) with the solid.
    pub fn chord(&self, origin: Vector3<f64>, dir: Vector3<f64>) -> Option<Chord> {
        let o = self.to_local(origin);
        let d = self.dir_to_local(dir);
        let (enter, exit, n_in, n_out) = match self.shape {
            Shape::Box { size } => {
                let mut lo = f64::NEG_INFINITY;
                let mut hi = f64::INFINITY;
                let (mut n_in, mut n_out) = (Vector3::zeros(), Vector3::zeros());
                for a in 0..3 {
                    let h = size[a] / 2.0;
                    if d[a].abs() < 1e-15 {
                        if o[a].abs() > h {
                            return None;
                        }
                        continue;
                    }
                    let (mut t0, mut t1) = ((-h - o[a]) / d[a], (h - o[a]) / d[a]);
                    let mut sign = -1.0;
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                        sign = 1.0;
                    }
                    if t0 > lo {
                        lo = t0;
                        n_in = Vector3::zeros();
                        n_in[a] = sign;
                    }
                    if t1 < hi {
                        hi = t1;
                        n_out = Vector3::zeros();
                        n_out[a] = -sign;
                    }
                }
                (lo, hi, n_in, n_out)
            }
            Shape::Cylinder { radius, height } => {
                let ax = self.cylinder_axis();
                let (u, v) = if ax == 2 { (0, 1) } else { (1, 2) };
                let a = d[u] * d[u] + d[v] * d[v];
                let b = o[u] * d[u] + o[v] * d[v];
                let c = o[u] * o[u] + o[v] * o[v] - radius * radius;
                let radial = |t: f64| {
                    let mut n = Vector3::zeros();
                    n[u] = o[u] + t * d[u];
                    n[v] = o[v] + t * d[v];
                    n / radius
                };
                let (mut lo, mut hi, mut n_in, mut n_out);
                if a < 1e-15 {
                    if c > 0.0 {
                        return None;
                    }
                    lo = f64::NEG_INFINITY;
                    hi = f64::INFINITY;
                    n_in = Vector3::zeros();
                    n_out = Vector3::zeros();
                } else {
                    let disc = b * b - a * c;
                    if disc < 0.0 {
                        return None;
                    }
                    let sq = disc.sqrt();
                    lo = (-b - sq) / a;
                    hi = (-b + sq) / a;
                    n_in = radial(lo);
                    n_out = radial(hi);
                }
                let h = height / 2.0;
                if d[ax].abs() < 1e-15 {
                    if o[ax].abs() > h {
                        return None;
                    }
                } else {
                    let (mut t0, mut t1) = ((-h - o[ax]) / d[ax], (h - o[ax]) / d[ax]);
                    let mut sign = -1.0;
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                        sign = 1.0;
                    }
                    if t0 > lo {
                        lo = t0;
                        n_in = Vector3::zeros();
                        n_in[ax] = sign;
                    }
                    if t1 < hi {
                        hi = t1;
                        n_out = Vector3::zeros();
                        n_out[ax] = -sign;
                    }
                }
                (lo, hi, n_in, n_out)
            }
            Shape::Sphere { radius } => {
                let b = o.dot(&d);
                let disc = b * b - (o.norm_squared() - radius * radius);
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let (lo, hi) = (-b - sq, -b + sq);
                ((lo), hi, (o + lo * d) / radius, (o + hi * d) / radius)
            }
        };
        (exit > enter).then(|| Chord {
            enter,
            exit,
            enter_normal: self.dir_to_world(n_in),
            exit_normal: self.dir_to_world(n_out),
        })
    }
}
