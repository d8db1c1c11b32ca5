//! Vehicle state, kinematic bicycle update and low-level controllers.

use super::geometry::{heading_vec, wrap_angle, LocalCoords, OrientedBox, Vec2};
use super::road::Lane;

pub const VEHICLE_LENGTH: f64 = 5.0;
pub const VEHICLE_WIDTH: f64 = 2.0;
pub const MAX_SPEED: f64 = 40.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VehicleState {
    pub position: Vec2,
    pub heading: f64,
    pub speed: f64,
    pub length: f64,
    pub width: f64,
    pub lane_id: usize,
}

impl VehicleState {
    pub fn new(position: Vec2, heading: f64, speed: f64, lane_id: usize) -> Self {
        Self {
            position,
            heading: wrap_angle(heading),
            speed: speed.clamp(0.0, MAX_SPEED),
            length: VEHICLE_LENGTH,
            width: VEHICLE_WIDTH,
            lane_id,
        }
    }

    pub fn footprint(&self) -> OrientedBox {
        OrientedBox { center: self.position, heading: self.heading, length: self.length, width: self.width }
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite()) && self.heading.is_finite() && self.speed.is_finite()
    }

    /// Kinematic bicycle with slip angle, centre-of-mass reference:
    /// `β = atan(tan δ / 2)`, `ψ' = v·sin β / (L/2)`.
    pub fn advance(&mut self, accel: f64, steer: f64, dt: f64) {
        let beta = (0.5 * steer.tan()).atan();
        let v = self.speed;
        self.position += heading_vec(self.heading + beta) * (v * dt);
        self.heading = wrap_angle(self.heading + v * beta.sin() / (self.length / 2.0) * dt);
        self.speed = (v + accel * dt).clamp(0.0, MAX_SPEED);
    }
}

/// Lane-tracking gains (time constants in seconds).
const TAU_ACC: f64 = 0.6;
const TAU_HEADING: f64 = 0.2;
const TAU_LATERAL: f64 = 0.6;
const TAU_PURSUIT: f64 = 0.1;

/// Steering that converges onto the centre line of `lane`.
pub fn steer_to_lane(state: &VehicleState, lane: &Lane, local: LocalCoords, max_steer: f64) -> f64 {
    let v = state.speed.max(1.0);
    let ahead = local.s + v * TAU_PURSUIT;
    let lane_heading = lane.line.heading(ahead);
    let lateral_speed = -local.lateral / TAU_LATERAL;
    let heading_cmd = (lateral_speed / v).clamp(-1.0, 1.0).asin();
    let heading_ref = lane_heading + heading_cmd.clamp(-std::f64::consts::FRAC_PI_4, std::f64::consts::FRAC_PI_4);
    let rate = wrap_angle(heading_ref - state.heading) / TAU_HEADING;
    let slip = (state.length / 2.0 / v * rate).clamp(-1.0, 1.0).asin();
    (2.0 * slip.tan()).atan().clamp(-max_steer, max_steer)
}

pub fn speed_control(speed: f64, target: f64) -> f64 {
    (target - speed) / TAU_ACC
}

/// Intelligent-driver-model parameters.
#[derive(Clone, Copy, Debug)]
pub struct Idm {
    pub max_accel: f64,
    pub comfort_decel: f64,
    pub min_gap: f64,
    pub time_headway: f64,
    pub exponent: f64,
}

impl Default for Idm {
    fn default() -> Self {
        Self { max_accel: 3.0, comfort_decel: 5.0, min_gap: 5.0, time_headway: 1.5, exponent: 4.0 }
    }
}

impl Idm {
    /// Longitudinal acceleration towards `target` behind an optional leader
    /// `(bumper gap, leader speed)`.
    pub fn accel(&self, speed: f64, target: f64, leader: Option<(f64, f64)>) -> f64 {
        let free = 1.0 - (speed / target.max(0.1)).powf(self.exponent);
        let interaction = match leader {
            Some((gap, lead_speed)) => {
                let desired = self.min_gap
                    + speed * self.time_headway
                    + speed * (speed - lead_speed) / (2.0 * (self.max_accel * self.comfort_decel).sqrt());
                (desired.max(0.0) / gap.max(0.5)).powi(2)
            }
            None => 0.0,
        };
        (self.max_accel * (free - interaction)).clamp(-3.0 * self.comfort_decel, self.max_accel)
    }
}

pub fn tracking_accel(speed: f64, target: f64, limit: f64) -> f64 {
    speed_control(speed, target).clamp(-limit, limit)
}
