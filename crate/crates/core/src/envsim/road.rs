//! Road topologies: drivable surfaces for rendering and off-road tests, and
//! lanes (or full routes) that vehicles track.

use std::f64::consts::{FRAC_PI_2, PI};

use super::geometry::{arc, bezier, LocalCoords, Polyline, Vec2};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Marking {
    None,
    Solid,
    Dashed,
}

#[derive(Clone, Debug)]
pub struct Surface {
    pub line: Polyline,
    pub width: f64,
    pub left: Marking,
    pub right: Marking,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Side {
    Left,
    Right,
}

/// Lane change from `from` to `to` allowed while `s` on `from` is within `s_range`.
#[derive(Clone, Copy, Debug)]
pub struct Adjacency {
    pub from: usize,
    pub to: usize,
    pub side: Side,
    pub s_range: (f64, f64),
}

#[derive(Clone, Debug)]
pub struct Lane {
    pub line: Polyline,
    pub width: f64,
    /// Roundabout routes: arc length where the route joins the ring, and the ring join point.
    pub ring_entry: Option<(f64, Vec2)>,
    /// Roundabout routes: arc length where the route leaves the ring.
    pub ring_exit: Option<f64>,
}

impl Lane {
    fn plain(line: Polyline, width: f64) -> Self {
        Self { line, width, ring_entry: None, ring_exit: None }
    }
}

#[derive(Clone, Debug)]
pub struct Road {
    pub surfaces: Vec<Surface>,
    pub lanes: Vec<Lane>,
    pub adjacency: Vec<Adjacency>,
}

pub const LANE_WIDTH: f64 = 4.0;

/// Merge layout: the ramp joins the auxiliary lane at `MERGE_AUX_START` and the
/// auxiliary lane ends at `MERGE_RAMP_END` (both world x).
pub const MERGE_AUX_START: f64 = 40.0;
pub const MERGE_RAMP_END: f64 = 220.0;
pub const MERGE_MAIN_START: f64 = -200.0;
pub const RAMP_LANE: usize = 2;

pub const RING_RADIUS: f64 = 20.0;
const RING_JOIN_ANGLE: f64 = 0.4;
const ARM_LENGTH: f64 = 150.0;
const ARM_JOIN: f64 = 30.0;

/// Arm directions in the roundabout, counter-clockwise from south.
pub const ARM_ANGLES: [f64; 4] = [-FRAC_PI_2, 0.0, FRAC_PI_2, PI];

impl Road {
    pub fn highway(lanes: usize, length: f64) -> Self {
        let lane_list: Vec<Lane> = (0..lanes)
            .map(|i| {
                let y = i as f64 * LANE_WIDTH;
                Lane::plain(Polyline::straight(Vec2::new(-100.0, y), Vec2::new(length, y)), LANE_WIDTH)
            })
            .collect();
        let surfaces = lane_list
            .iter()
            .enumerate()
            .map(|(i, l)| Surface {
                line: l.line.clone(),
                width: LANE_WIDTH,
                right: if i == 0 { Marking::Solid } else { Marking::Dashed },
                left: if i + 1 == lanes { Marking::Solid } else { Marking::None },
            })
            .collect();
        let mut adjacency = Vec::new();
        for i in 0..lanes.saturating_sub(1) {
            let full = (f64::NEG_INFINITY, f64::INFINITY);
            adjacency.push(Adjacency { from: i, to: i + 1, side: Side::Left, s_range: full });
            adjacency.push(Adjacency { from: i + 1, to: i, side: Side::Right, s_range: full });
        }
        Self { surfaces, lanes: lane_list, adjacency }
    }

    /// Two main lanes along +x (lane 0 rightmost) and an on-ramp (lane 2) that
    /// runs parallel to lane 0 between the auxiliary start and the ramp end.
    pub fn merge(length: f64) -> Self {
        let main = |y: f64| Polyline::straight(Vec2::new(MERGE_MAIN_START, y), Vec2::new(length, y));
        let ramp = Polyline::new(vec![
            Vec2::new(-80.0, -4.0 - 12.0),
            Vec2::new(MERGE_AUX_START, -LANE_WIDTH),
            Vec2::new(MERGE_RAMP_END, -LANE_WIDTH),
        ]);
        let aux_s = (MERGE_AUX_START - -80.0f64).hypot(12.0);
        let ramp_end_s = ramp.length();
        let lanes = vec![
            Lane::plain(main(0.0), LANE_WIDTH),
            Lane::plain(main(LANE_WIDTH), LANE_WIDTH),
            Lane::plain(ramp, LANE_WIDTH),
        ];
        let surfaces = vec![
            Surface { line: lanes[0].line.clone(), width: LANE_WIDTH, left: Marking::None, right: Marking::Solid },
            Surface { line: lanes[1].line.clone(), width: LANE_WIDTH, left: Marking::Solid, right: Marking::Dashed },
            Surface { line: lanes[2].line.clone(), width: LANE_WIDTH, left: Marking::Dashed, right: Marking::Solid },
        ];
        let main_aux = (MERGE_AUX_START - MERGE_MAIN_START, MERGE_RAMP_END - MERGE_MAIN_START);
        let full = (f64::NEG_INFINITY, f64::INFINITY);
        let adjacency = vec![
            Adjacency { from: 0, to: 1, side: Side::Left, s_range: full },
            Adjacency { from: 1, to: 0, side: Side::Right, s_range: full },
            Adjacency { from: RAMP_LANE, to: 0, side: Side::Left, s_range: (aux_s, ramp_end_s) },
            Adjacency { from: 0, to: RAMP_LANE, side: Side::Right, s_range: main_aux },
        ];
        Self { surfaces, lanes, adjacency }
    }

    /// Single-lane counter-clockwise ring with four two-way arms. Lane
    /// `route_index(a, e)` enters from arm `a` and leaves at arm `e`.
    pub fn roundabout() -> Self {
        let mut surfaces = vec![Surface {
            line: Polyline::new(arc(Vec2::zeros(), RING_RADIUS, 0.0, 2.0 * PI, 2.0)),
            width: LANE_WIDTH + 1.0,
            left: Marking::Solid,
            right: Marking::Solid,
        }];
        for &theta in &ARM_ANGLES {
            for pts in [entry_points(theta), exit_points(theta)] {
                surfaces.push(Surface {
                    line: Polyline::new(pts),
                    width: LANE_WIDTH,
                    left: Marking::Solid,
                    right: Marking::Solid,
                });
            }
        }
        let mut lanes = Vec::new();
        for a in 0..4 {
            for e in 0..4 {
                if a == e {
                    continue;
                }
                lanes.push(roundabout_route(a, e));
            }
        }
        Self { surfaces, lanes, adjacency: Vec::new() }
    }

    /// Lane reachable by a change to `side` from lane `from` at arc length `s`.
    pub fn neighbor(&self, from: usize, side: Side, s: f64) -> Option<usize> {
        self.adjacency
            .iter()
            .find(|a| a.from == from && a.side == side && s >= a.s_range.0 && s <= a.s_range.1)
            .map(|a| a.to)
    }

    /// Whether `p` lies on some drivable surface widened by `margin`.
    pub fn on_road(&self, p: Vec2, margin: f64) -> bool {
        self.surfaces.iter().any(|sf| {
            let half = sf.width / 2.0 + margin;
            if !sf.line.near_bbox(p, half) {
                return false;
            }
            let c = sf.line.project(p, None);
            c.lateral.abs() <= half && c.s >= -margin && c.s <= sf.line.length() + margin
        })
    }

    pub fn project(&self, lane: usize, p: Vec2, hint: Option<f64>) -> LocalCoords {
        self.lanes[lane].line.project(p, hint.map(|s| (s, 40.0)))
    }
}

/// Index of the roundabout route from arm `a` to arm `e` (`a != e`).
pub fn route_index(a: usize, e: usize) -> usize {
    assert!(a != e && a < 4 && e < 4);
    a * 3 + if e > a { e - 1 } else { e }
}

fn rotate(p: Vec2, angle: f64) -> Vec2 {
    let (s, c) = angle.sin_cos();
    Vec2::new(c * p.x - s * p.y, s * p.x + c * p.y)
}

/// Inbound lane of arm `theta` from its far end to the ring join point.
fn entry_points(theta: f64) -> Vec<Vec2> {
    // Built for the south arm (driving +y at x = +2) and rotated into place.
    let phi = -FRAC_PI_2 + RING_JOIN_ANGLE;
    let off = LANE_WIDTH / 2.0;
    let q = Vec2::new(RING_RADIUS * phi.cos(), RING_RADIUS * phi.sin());
    let t = (off - q.x) / -phi.sin();
    let p1 = Vec2::new(off, q.y + t * phi.cos());
    let mut pts = vec![Vec2::new(off, -ARM_LENGTH)];
    pts.extend(bezier(Vec2::new(off, -ARM_JOIN), p1, q, 10));
    pts.into_iter().map(|p| rotate(p, theta + FRAC_PI_2)).collect()
}

/// Outbound lane of arm `theta` from the ring join point to its far end.
fn exit_points(theta: f64) -> Vec<Vec2> {
    let south = entry_points(-FRAC_PI_2);
    south.iter().rev().map(|p| rotate(Vec2::new(p.x, -p.y), theta - FRAC_PI_2)).collect()
}

fn roundabout_route(a: usize, e: usize) -> Lane {
    let (ta, te) = (ARM_ANGLES[a], ARM_ANGLES[e]);
    let entry = entry_points(ta);
    let from = ta + RING_JOIN_ANGLE;
    let mut to = te - RING_JOIN_ANGLE;
    while to <= from {
        to += 2.0 * PI;
    }
    let ring = arc(Vec2::zeros(), RING_RADIUS, from, to, 2.0);
    let exit = exit_points(te);
    let join = *entry.last().unwrap();
    let mut pts = entry;
    let entry_s = Polyline::new(pts.clone()).length();
    pts.extend(ring.into_iter().skip(1));
    let exit_s = Polyline::new(pts.clone()).length();
    pts.extend(exit.into_iter().skip(1));
    Lane {
        line: Polyline::new(pts),
        width: LANE_WIDTH,
        ring_entry: Some((entry_s, join)),
        ring_exit: Some(exit_s),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundabout_routes_are_continuous() {
        let road = Road::roundabout();
        assert_eq!(road.lanes.len(), 12);
        for lane in &road.lanes {
            for w in lane.line.points().windows(2) {
                let gap = (w[1] - w[0]).norm();
                assert!(gap > 1e-9 && gap < 121.0, "gap {gap}");
            }
            let (entry_s, join) = lane.ring_entry.unwrap();
            assert!(((lane.line.position(entry_s, 0.0) - join).norm()) < 1e-9);
            assert!((join.norm() - RING_RADIUS).abs() < 1e-9);
            assert!(lane.ring_exit.unwrap() > entry_s);
        }
    }

    #[test]
    fn routes_stay_on_the_road() {
        let road = Road::roundabout();
        for lane in &road.lanes {
            let len = lane.line.length();
            let mut s = 0.0;
            while s < len {
                assert!(road.on_road(lane.line.position(s, 0.0), 0.0), "s={s}");
                s += 1.0;
            }
        }
    }

    #[test]
    fn entry_and_exit_sides() {
        // South arm inbound runs north on the east side; north arm outbound runs north east of centre too.
        let e = entry_points(-FRAC_PI_2);
        assert!((e[0] - Vec2::new(2.0, -ARM_LENGTH)).norm() < 1e-9);
        let x = exit_points(FRAC_PI_2);
        assert!((x.last().unwrap() - Vec2::new(2.0, ARM_LENGTH)).norm() < 1e-9);
    }

    #[test]
    fn merge_adjacency_is_positional() {
        let road = Road::merge(2000.0);
        assert_eq!(road.neighbor(RAMP_LANE, Side::Left, 10.0), None);
        assert_eq!(road.neighbor(RAMP_LANE, Side::Left, 150.0), Some(0));
        assert_eq!(road.neighbor(0, Side::Left, 0.0), Some(1));
        assert!(!road.on_road(Vec2::new(MERGE_RAMP_END + 10.0, -4.0), 0.0));
    }

    #[test]
    fn highway_edges() {
        let road = Road::highway(4, 1000.0);
        assert_eq!(road.neighbor(0, Side::Right, 0.0), None);
        assert_eq!(road.neighbor(3, Side::Left, 0.0), None);
        assert!(road.on_road(Vec2::new(10.0, 13.9), 0.0));
        assert!(!road.on_road(Vec2::new(10.0, 14.1), 0.0));
    }
}
