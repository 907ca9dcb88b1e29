use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::dynamics::wrap_angle;
use crate::error::{ensure_finite, Error, Result};

const HEADING_TOL: f64 = 1e-6;

/// Lane centerline with an explicit tangent heading per vertex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LaneRepr", into = "LaneRepr")]
pub struct Lane {
    centerline: Vec<Vector2<f64>>,
    headings: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LaneRepr {
    centerline: Vec<[f64; 2]>,
    headings: Vec<f64>,
}

impl TryFrom<LaneRepr> for Lane {
    type Error = Error;
    fn try_from(r: LaneRepr) -> Result<Self> {
        Lane::new(
            r.centerline.iter().map(|p| Vector2::new(p[0], p[1])).collect(),
            r.headings,
        )
    }
}

impl From<Lane> for LaneRepr {
    fn from(l: Lane) -> Self {
        LaneRepr {
            centerline: l.centerline.iter().map(|p| [p.x, p.y]).collect(),
            headings: l.headings,
        }
    }
}

/// Closest point on a lane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneProjection {
    pub point: Vector2<f64>,
    pub heading: f64,
    pub segment: usize,
    /// Fraction along `segment`, clamped to `[0, 1]`.
    pub fraction: f64,
    pub clamped: bool,
    pub distance: f64,
}

impl Lane {
    pub fn new(centerline: Vec<Vector2<f64>>, headings: Vec<f64>) -> Result<Self> {
        if centerline.len() < 2 {
            return Err(Error::InvalidInput("lane needs at least two vertices".into()));
        }
        if headings.len() != centerline.len() {
            return Err(Error::DimensionMismatch {
                what: "lane headings",
                expected: centerline.len(),
                got: headings.len(),
            });
        }
        for p in &centerline {
            ensure_finite(p.x, "lane vertex")?;
            ensure_finite(p.y, "lane vertex")?;
        }
        let mut directions = Vec::with_capacity(centerline.len() - 1);
        for w in centerline.windows(2) {
            let d = w[1] - w[0];
            if d.norm() == 0.0 {
                return Err(Error::InvalidInput("lane has repeated consecutive vertices".into()));
            }
            directions.push(d.y.atan2(d.x));
        }
        for (i, &h) in headings.iter().enumerate() {
            ensure_finite(h, "lane heading")?;
            let incoming = i.checked_sub(1).map(|j| directions[j]);
            let outgoing = directions.get(i).copied();
            let ok = [incoming, outgoing]
                .into_iter()
                .flatten()
                .any(|d| wrap_angle(h - d).abs() <= HEADING_TOL);
            if !ok {
                return Err(Error::InvalidInput(format!(
                    "lane heading at vertex {i} disagrees with its segments"
                )));
            }
        }
        Ok(Self {
            centerline,
            headings: headings.into_iter().map(wrap_angle).collect(),
        })
    }

    /// Straight two-vertex lane.
    pub fn straight(from: Vector2<f64>, to: Vector2<f64>) -> Result<Self> {
        let d = to - from;
        let h = d.y.atan2(d.x);
        Lane::new(vec![from, to], vec![h, h])
    }

    pub fn centerline(&self) -> &[Vector2<f64>] {
        &self.centerline
    }

    pub fn headings(&self) -> &[f64] {
        &self.headings
    }

    /// Change of heading across `segment`, wrapped.
    pub fn heading_delta(&self, segment: usize) -> f64 {
        wrap_angle(self.headings[segment + 1] - self.headings[segment])
    }

    pub fn project(&self, p: &Vector2<f64>) -> LaneProjection {
        let mut best: Option<LaneProjection> = None;
        for (i, w) in self.centerline.windows(2).enumerate() {
            let d = w[1] - w[0];
            let raw = (p - w[0]).dot(&d) / d.norm_squared();
            let fraction = raw.clamp(0.0, 1.0);
            let point = w[0] + d * fraction;
            let distance = (p - point).norm();
            if best.is_none_or(|b| distance < b.distance) {
                best = Some(LaneProjection {
                    point,
                    heading: wrap_angle(self.headings[i] + fraction * self.heading_delta(i)),
                    segment: i,
                    fraction,
                    clamped: raw != fraction,
                    distance,
                });
            }
        }
        best.expect("lane has at least one segment")
    }
}

/// Closest point over all lanes; ties resolve to the lowest lane index.
pub fn project_to_lane(p: &Vector2<f64>, lanes: &[Lane]) -> Result<(LaneProjection, usize)> {
    let mut best: Option<(LaneProjection, usize)> = None;
    for (i, lane) in lanes.iter().enumerate() {
        let proj = lane.project(p);
        if best.is_none_or(|(b, _)| proj.distance < b.distance) {
            best = Some((proj, i));
        }
    }
    best.ok_or(Error::NoLanes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn x_axis() -> Lane {
        Lane::straight(Vector2::new(-5.0, 0.0), Vector2::new(5.0, 0.0)).unwrap()
    }

    #[test]
    fn projects_onto_axis() {
        let (p, idx) = project_to_lane(&Vector2::new(1.0, 0.5), &[x_axis()]).unwrap();
        assert_eq!(idx, 0);
        assert!((p.point - Vector2::new(1.0, 0.0)).norm() < 1e-12);
        assert_eq!(p.heading, 0.0);
    }

    #[test]
    fn clamps_past_the_end() {
        let (p, _) = project_to_lane(&Vector2::new(9.0, 1.0), &[x_axis()]).unwrap();
        assert!(p.clamped);
        assert!((p.point - Vector2::new(5.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn picks_nearer_lane() {
        let upper = Lane::straight(Vector2::new(-5.0, 4.0), Vector2::new(5.0, 4.0)).unwrap();
        let (_, idx) = project_to_lane(&Vector2::new(0.0, 1.0), &[x_axis(), upper.clone()]).unwrap();
        assert_eq!(idx, 0);
        // equidistant: lowest index wins
        let (_, idx) = project_to_lane(&Vector2::new(0.0, 2.0), &[upper, x_axis()]).unwrap();
        assert_eq!(idx, 0);
    }

    #[test]
    fn empty_lane_set_is_an_error() {
        assert!(matches!(project_to_lane(&Vector2::zeros(), &[]), Err(Error::NoLanes)));
    }

    #[test]
    fn validation() {
        assert!(Lane::new(vec![Vector2::zeros()], vec![0.0]).is_err());
        assert!(Lane::new(vec![Vector2::zeros(), Vector2::zeros()], vec![0.0, 0.0]).is_err());
        assert!(Lane::new(vec![Vector2::zeros(), Vector2::new(1.0, 0.0)], vec![0.0, 0.3]).is_err());
        // a corner: each vertex agrees with one adjacent segment
        let corner = Lane::new(
            vec![Vector2::zeros(), Vector2::new(1.0, 0.0), Vector2::new(1.0, 1.0)],
            vec![0.0, std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2],
        );
        assert!(corner.is_ok());
    }

    #[test]
    fn interpolates_heading_along_segment() {
        let lane = Lane::new(
            vec![Vector2::zeros(), Vector2::new(1.0, 0.0), Vector2::new(1.0, 1.0)],
            vec![0.0, 0.0, std::f64::consts::FRAC_PI_2],
        )
        .unwrap();
        let p = lane.project(&Vector2::new(1.2, 0.5));
        assert_eq!(p.segment, 1);
        assert!((p.heading - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn projection_never_farther_than_a_vertex(
            pts in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 2..6),
            px in -15.0f64..15.0, py in -15.0f64..15.0,
        ) {
            let verts: Vec<_> = pts.iter().map(|&(x, y)| Vector2::new(x, y)).collect();
            prop_assume!(verts.windows(2).all(|w| (w[1] - w[0]).norm() > 1e-6));
            let heads: Vec<_> = verts.windows(2).map(|w| (w[1] - w[0]).y.atan2((w[1] - w[0]).x)).collect();
            let mut headings = heads.clone();
            headings.push(*heads.last().unwrap());
            let lane = Lane::new(verts.clone(), headings).unwrap();
            let p = Vector2::new(px, py);
            let (proj, _) = project_to_lane(&p, &[lane]).unwrap();
            for v in &verts {
                prop_assert!(proj.distance <= (p - v).norm() + 1e-12);
            }
        }
    }
}
