//! Piecewise-cubic centerline (Catmull-Rom through control points) with
//! nearest-point queries, the backbone of the analytic tube phantom.

use crate::geometry::{vadd, vdot, vnorm, vscale, vsub, Vec3};

/// Catmull-Rom spline through control points, parameterized by s in [0, 1]
/// spread uniformly across segments. Endpoint tangents use one-sided
/// differences.
#[derive(Debug, Clone)]
pub struct Curve {
    points: Vec<Vec3>,
}

impl Curve {
    pub fn new(points: Vec<Vec3>) -> Self {
        assert!(points.len() >= 2, "curve needs at least two control points");
        Self { points }
    }

    pub fn segments(&self) -> usize {
        self.points.len() - 1
    }

    /// Hermite data for one segment: endpoints plus tangents. Interior
    /// tangents are central differences; ends use one-sided differences so
    /// collinear control points give an exactly linear parameterization.
    fn hermite(&self, seg: usize) -> (Vec3, Vec3, Vec3, Vec3) {
        let pts = &self.points;
        let last = self.segments() - 1;
        let p1 = pts[seg];
        let p2 = pts[seg + 1];
        let m1 = if seg == 0 {
            vsub(pts[1], pts[0])
        } else {
            vscale(vsub(pts[seg + 1], pts[seg - 1]), 0.5)
        };
        let m2 = if seg == last {
            vsub(pts[seg + 1], pts[seg])
        } else {
            vscale(vsub(pts[seg + 2], pts[seg]), 0.5)
        };
        (p1, p2, m1, m2)
    }

    /// Map global s in [0,1] to (segment index, local t in [0,1]).
    fn locate(&self, s: f64) -> (usize, f64) {
        let segs = self.segments() as f64;
        let scaled = (s.clamp(0.0, 1.0)) * segs;
        let mut seg = scaled.floor() as usize;
        if seg >= self.segments() {
            seg = self.segments() - 1;
        }
        (seg, scaled - seg as f64)
    }

    pub fn eval(&self, s: f64) -> Vec3 {
        let (seg, t) = self.locate(s);
        let (p1, p2, m1, m2) = self.hermite(seg);
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        vadd(
            vadd(vscale(p1, h00), vscale(m1, h10)),
            vadd(vscale(p2, h01), vscale(m2, h11)),
        )
    }

    /// dC/ds (scaled to the global parameter).
    pub fn deriv(&self, s: f64) -> Vec3 {
        let (seg, t) = self.locate(s);
        let (p1, p2, m1, m2) = self.hermite(seg);
        let t2 = t * t;
        let dh00 = 6.0 * t2 - 6.0 * t;
        let dh10 = 3.0 * t2 - 4.0 * t + 1.0;
        let dh01 = -6.0 * t2 + 6.0 * t;
        let dh11 = 3.0 * t2 - 2.0 * t;
        let d = vadd(
            vadd(vscale(p1, dh00), vscale(m1, dh10)),
            vadd(vscale(p2, dh01), vscale(m2, dh11)),
        );
        vscale(d, self.segments() as f64)
    }

    /// Unit tangent at s.
    pub fn tangent(&self, s: f64) -> Vec3 {
        let d = self.deriv(s);
        let n = vnorm(d);
        if n < 1e-12 {
            [0.0, 0.0, 1.0]
        } else {
            vscale(d, 1.0 / n)
        }
    }

    /// Parameter of the point nearest to `p`: coarse scan over all segments
    /// followed by golden-section refinement. Deterministic.
    pub fn nearest(&self, p: Vec3) -> f64 {
        let coarse = self.segments() * 8;
        let mut best_s = 0.0;
        let mut best_d = f64::INFINITY;
        for i in 0..=coarse {
            let s = i as f64 / coarse as f64;
            let d = dist2(p, self.eval(s));
            if d < best_d {
                best_d = d;
                best_s = s;
            }
        }
        let half = 1.0 / coarse as f64;
        let (mut lo, mut hi) = ((best_s - half).max(0.0), (best_s + half).min(1.0));
        const PHI: f64 = 0.618_033_988_749_894_9;
        let mut x1 = hi - PHI * (hi - lo);
        let mut x2 = lo + PHI * (hi - lo);
        let mut f1 = dist2(p, self.eval(x1));
        let mut f2 = dist2(p, self.eval(x2));
        for _ in 0..40 {
            if f1 < f2 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - PHI * (hi - lo);
                f1 = dist2(p, self.eval(x1));
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + PHI * (hi - lo);
                f2 = dist2(p, self.eval(x2));
            }
        }
        0.5 * (lo + hi)
    }

    /// Approximate arc length via fixed-resolution sampling.
    pub fn arc_length(&self) -> f64 {
        let steps = self.segments() * 64;
        let mut acc = 0.0;
        let mut prev = self.eval(0.0);
        for i in 1..=steps {
            let p = self.eval(i as f64 / steps as f64);
            acc += vnorm(vsub(p, prev));
            prev = p;
        }
        acc
    }
}

fn dist2(a: Vec3, b: Vec3) -> f64 {
    vdot(vsub(a, b), vsub(a, b))
}
