//! Deterministic 2-D driving micro-environments with BEV observations.

pub mod geometry;
pub mod render;
pub mod reward;
pub mod road;
pub mod vehicle;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use geometry::{heading_vec, wrap_angle, Vec2};
use reward::{reward_fn, RewardInputs, RewardParams, RewardTerms, RewardWeights, SafeDistanceMode};
use road::{route_index, Road, Side, MERGE_RAMP_END, RAMP_LANE};
use vehicle::{steer_to_lane, tracking_accel, Idm, VehicleState, VEHICLE_LENGTH};

pub use render::{render_bev, write_ppm, IMAGE_BYTES, IMAGE_SIZE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Highway,
    Merge,
    Roundabout,
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "highway" => Ok(Task::Highway),
            "merge" => Ok(Task::Merge),
            "roundabout" => Ok(Task::Roundabout),
            _ => Err(Error::Config(format!("unknown task `{s}` (highway|merge|roundabout)"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Highway => "highway",
            Task::Merge => "merge",
            Task::Roundabout => "roundabout",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionSpace {
    Continuous,
    Discrete,
}

impl FromStr for ActionSpace {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "continuous" => Ok(ActionSpace::Continuous),
            "discrete" => Ok(ActionSpace::Discrete),
            _ => Err(Error::Config(format!("unknown action space `{s}` (continuous|discrete)"))),
        }
    }
}

impl fmt::Display for ActionSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActionSpace::Continuous => "continuous",
            ActionSpace::Discrete => "discrete",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetaAction {
    LaneLeft = 0,
    Idle = 1,
    LaneRight = 2,
    Faster = 3,
    Slower = 4,
}

impl MetaAction {
    pub const COUNT: usize = 5;
    pub const ALL: [MetaAction; 5] =
        [MetaAction::LaneLeft, MetaAction::Idle, MetaAction::LaneRight, MetaAction::Faster, MetaAction::Slower];

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Action {
    /// Acceleration (m/s²) and steering angle (rad), clamped to the configured bounds.
    Continuous { accel: f64, steer: f64 },
    Meta(MetaAction),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    pub task: Task,
    pub action_space: ActionSpace,
    pub time_limit: usize,
    /// Highway: vehicles spawned at reset. Merge/roundabout: cap on simultaneous traffic.
    pub vehicle_count: usize,
    pub vehicle_density: f64,
    pub speed_target: (f64, f64),
    pub collision_penalty: f64,
    pub success_reward: f64,
    pub shaping_weight: f64,
    pub dt: f64,
    pub seed: u64,
    pub weights: RewardWeights,
    pub safe_distance_mode: SafeDistanceMode,
    pub safe_headway: f64,
    pub lane_change_needs_gain: bool,
    pub lanes: usize,
    /// Poisson arrival rate per entry lane or arm, vehicles per second.
    pub spawn_rate: f64,
    /// Per-step probability that a traffic vehicle attempts a lane change.
    pub traffic_lane_change_prob: f64,
    pub accel_limit: f64,
    pub steer_limit: f64,
    pub meters_per_pixel: f64,
}

impl EnvConfig {
    pub fn for_task(task: Task) -> Self {
        let base = EnvConfig {
            task,
            action_space: ActionSpace::Continuous,
            time_limit: 200,
            vehicle_count: 50,
            vehicle_density: 1.5,
            speed_target: (23.0, 27.0),
            collision_penalty: -5.0,
            success_reward: 1.0,
            shaping_weight: 0.85,
            dt: 0.1,
            seed: 0,
            weights: RewardWeights { speed: 1.0, safe_distance: 1.0, lane_change: 0.1, progress: 0.5, heading: 0.5, survival: 0.0 },
            safe_distance_mode: SafeDistanceMode::Penalty,
            safe_headway: 1.5,
            lane_change_needs_gain: true,
            lanes: 4,
            spawn_rate: 0.0,
            traffic_lane_change_prob: 0.005,
            accel_limit: 5.0,
            steer_limit: 0.6,
            meters_per_pixel: 1.0,
        };
        match task {
            Task::Highway => base,
            Task::Merge => EnvConfig {
                action_space: ActionSpace::Discrete,
                time_limit: 800,
                vehicle_count: 12,
                vehicle_density: 0.0,
                speed_target: (20.0, 28.0),
                collision_penalty: -1.0,
                success_reward: 0.8,
                shaping_weight: 0.8,
                weights: RewardWeights { speed: 0.5, safe_distance: 0.5, lane_change: -0.3, progress: 1.0, heading: 0.5, survival: 0.1 },
                safe_distance_mode: SafeDistanceMode::Symmetric,
                lane_change_needs_gain: false,
                lanes: 2,
                spawn_rate: 0.4,
                ..base
            },
            Task::Roundabout => EnvConfig {
                action_space: ActionSpace::Discrete,
                time_limit: 800,
                vehicle_count: 10,
                vehicle_density: 0.0,
                speed_target: (8.0, 15.0),
                collision_penalty: -1.0,
                success_reward: 1.0,
                shaping_weight: 0.8,
                weights: RewardWeights { speed: 0.5, safe_distance: 1.0, lane_change: -0.1, progress: 0.5, heading: 1.0, survival: 0.3 },
                safe_distance_mode: SafeDistanceMode::Symmetric,
                lane_change_needs_gain: false,
                lanes: 1,
                spawn_rate: 0.15,
                traffic_lane_change_prob: 0.0,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.time_limit == 0 {
            return bad("env.time_limit must be positive".into());
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("env.dt must be positive, got {}", self.dt));
        }
        if !(self.speed_target.0 > 0.0 && self.speed_target.0 < self.speed_target.1) {
            return bad(format!("env.speed_target needs 0 < lo < hi, got {:?}", self.speed_target));
        }
        if self.task == Task::Highway && (self.lanes == 0 || self.vehicle_density <= 0.0) {
            return bad("highway needs at least one lane and a positive vehicle density".into());
        }
        if self.accel_limit <= 0.0 || self.steer_limit <= 0.0 || self.steer_limit >= std::f64::consts::FRAC_PI_2 {
            return bad("env.accel_limit and env.steer_limit must be positive (steer below π/2)".into());
        }
        if self.meters_per_pixel <= 0.0 || self.safe_headway <= 0.0 {
            return bad("env.meters_per_pixel and env.safe_headway must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.traffic_lane_change_prob) || self.spawn_rate < 0.0 {
            return bad("env.traffic_lane_change_prob must be in [0, 1] and env.spawn_rate non-negative".into());
        }
        Ok(())
    }

    pub fn reward_params(&self) -> RewardParams {
        RewardParams {
            weights: self.weights,
            shaping_weight: self.shaping_weight,
            collision_penalty: self.collision_penalty,
            success_reward: self.success_reward,
            speed_target: self.speed_target,
            safe_headway: self.safe_headway,
            safe_distance_mode: self.safe_distance_mode,
            lane_change_needs_gain: self.lane_change_needs_gain,
            dt: self.dt,
        }
    }

    /// Target speeds selectable by the faster/slower meta-actions.
    pub fn speed_levels(&self) -> [f64; 4] {
        let (lo, hi) = self.speed_target;
        [0.0, lo, 0.5 * (lo + hi), hi]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// Row-major 64×64×3 RGB bytes.
    pub image: Vec<u8>,
    pub ego_speed: f64,
    pub step_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
    pub collided: bool,
    pub success: bool,
    pub terms: RewardTerms,
}

#[derive(Clone, Debug)]
struct Car {
    state: VehicleState,
    s: f64,
    target_speed: f64,
}

pub struct Env {
    cfg: EnvConfig,
    road: Road,
    params: RewardParams,
    idm: Idm,
    ego: Car,
    speed_level: usize,
    traffic: Vec<Car>,
    rng: ChaCha8Rng,
    step_index: usize,
    finished: bool,
    speed_sum: f64,
}

const SENSE_RANGE: f64 = 80.0;

impl Env {
    /// Build the task topology and place ego and traffic; deterministic in `(config, seed)`.
    pub fn reset(config: &EnvConfig, seed: u64) -> Result<(Env, Observation)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let horizon = 300.0 + vehicle::MAX_SPEED * config.dt * config.time_limit as f64;
        let road = match config.task {
            Task::Highway => Road::highway(config.lanes, horizon),
            Task::Merge => Road::merge(horizon),
            Task::Roundabout => Road::roundabout(),
        };
        let levels = config.speed_levels();
        let (lo, hi) = config.speed_target;
        let place = |road: &Road, lane: usize, s: f64, speed: f64| -> Car {
            let line = &road.lanes[lane].line;
            Car { state: VehicleState::new(line.position(s, 0.0), line.heading(s), speed, lane), s, target_speed: speed }
        };
        let ego_speed = 0.5 * (lo + hi);
        let (ego, traffic) = match config.task {
            Task::Highway => {
                let lane = rng.random_range(0..config.lanes);
                let ego = place(&road, lane, 100.0, ego_speed);
                let mut traffic = Vec::with_capacity(config.vehicle_count);
                let mut front = ego.s;
                for _ in 0..config.vehicle_count {
                    let speed = rng.random_range(20.0..25.0);
                    let offset = (12.0 + speed) / config.vehicle_density * (-5.0 / 40.0 * config.lanes as f64).exp();
                    front += offset * rng.random_range(0.9..1.1);
                    let lane = rng.random_range(0..config.lanes);
                    traffic.push(place(&road, lane, front, speed));
                }
                (ego, traffic)
            }
            Task::Merge => {
                let ego = place(&road, RAMP_LANE, 20.0, lo);
                let mut traffic: Vec<Car> = Vec::new();
                for _ in 0..config.vehicle_count / 2 {
                    let lane = rng.random_range(0..2);
                    let s = rng.random_range(80.0..500.0);
                    let speed = rng.random_range(20.0..26.0);
                    if traffic.iter().all(|c| c.state.lane_id != lane || (c.s - s).abs() > 25.0) {
                        traffic.push(place(&road, lane, s, speed));
                    }
                }
                (ego, traffic)
            }
            Task::Roundabout => {
                let ego_lane = route_index(0, 2);
                let ego = Car { target_speed: levels[2], ..place(&road, ego_lane, 70.0, 10.0) };
                let mut traffic: Vec<Car> = Vec::new();
                for _ in 0..config.vehicle_count / 2 {
                    let a = rng.random_range(1..4);
                    let e = (a + rng.random_range(1..4)) % 4;
                    let lane = route_index(a, e);
                    let entry = road.lanes[lane].ring_entry.map(|(s, _)| s).unwrap_or(0.0);
                    let s = rng.random_range(entry - 60.0..entry + 40.0);
                    let speed = rng.random_range(8.0..12.0);
                    let pos = road.lanes[lane].line.position(s, 0.0);
                    let clear = traffic.iter().chain(std::iter::once(&ego)).all(|c| (c.state.position - pos).norm() > 15.0);
                    if clear {
                        traffic.push(place(&road, lane, s, speed));
                    }
                }
                (ego, traffic)
            }
        };
        let mut env = Env {
            cfg: config.clone(),
            road,
            params: config.reward_params(),
            idm: Idm::default(),
            speed_level: 2,
            ego,
            traffic,
            rng,
            step_index: 0,
            finished: false,
            speed_sum: 0.0,
        };
        env.ego.target_speed = levels[env.speed_level];
        let obs = env.observe();
        Ok((env, obs))
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn road(&self) -> &Road {
        &self.road
    }

    pub fn ego(&self) -> &VehicleState {
        &self.ego.state
    }

    pub fn traffic(&self) -> impl Iterator<Item = &VehicleState> {
        self.traffic.iter().map(|c| &c.state)
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn observe(&self) -> Observation {
        let others: Vec<VehicleState> = self.traffic.iter().map(|c| c.state).collect();
        Observation {
            image: render_bev(&self.road, &self.ego.state, &others, self.cfg.meters_per_pixel),
            ego_speed: self.ego.state.speed,
            step_index: self.step_index,
        }
    }

    /// Nearest vehicle ahead (`ahead`) or behind on `lane` relative to arc length `s`,
    /// as `(bumper gap, speed)`. `skip` excludes one traffic index; `None` in
    /// `skip_ego` position means the ego is a candidate.
    fn neighbor_on_lane(&self, lane: usize, s: f64, from: Vec2, skip: Option<usize>, with_ego: bool, ahead: bool) -> Option<(f64, f64)> {
        let l = &self.road.lanes[lane];
        let ego = with_ego.then_some(&self.ego);
        let others = self.traffic.iter().enumerate().filter(|(i, _)| Some(*i) != skip).map(|(_, c)| c);
        let mut best: Option<(f64, f64)> = None;
        for c in others.chain(ego) {
            if (c.state.position - from).norm() > SENSE_RANGE {
                continue;
            }
            let local = l.line.project(c.state.position, Some((s, SENSE_RANGE + 10.0)));
            if local.lateral.abs() > l.width / 2.0 + 0.5 {
                continue;
            }
            let ds = local.s - s;
            if (ahead && ds <= 0.0) || (!ahead && ds >= 0.0) {
                continue;
            }
            let dist = ds.abs();
            if best.is_none_or(|(d, _)| dist < d) {
                best = Some((dist, c.state.speed));
            }
        }
        best.map(|(d, v)| (d - VEHICLE_LENGTH, v))
    }

    fn ego_headway(&self, lane: usize) -> Option<f64> {
        self.neighbor_on_lane(lane, self.ego.s, self.ego.state.position, None, false, true)
            .map(|(gap, _)| gap.max(0.0) / self.ego.state.speed.max(0.1))
    }

    /// Lane whose centre line is closest to `p` (within its arc-length range).
    fn occupied_lane(&self, p: Vec2, current: usize, hint: f64) -> usize {
        if self.cfg.task == Task::Roundabout {
            return current;
        }
        let mut best = (f64::INFINITY, current);
        for (i, l) in self.road.lanes.iter().enumerate() {
            let c = l.line.project(p, if i == current { Some((hint, 20.0)) } else { None });
            if c.s >= 0.0 && c.s <= l.line.length() && c.lateral.abs() < best.0 {
                best = (c.lateral.abs(), i);
            }
        }
        best.1
    }

    fn traffic_controls(&mut self) -> Vec<(f64, f64, usize)> {
        let mut out = Vec::with_capacity(self.traffic.len());
        for i in 0..self.traffic.len() {
            let car = &self.traffic[i];
            let mut lane = car.state.lane_id;
            let change = self.cfg.traffic_lane_change_prob > 0.0 && self.rng.random::<f64>() < self.cfg.traffic_lane_change_prob;
            if change {
                let side = if self.rng.random::<bool>() { Side::Left } else { Side::Right };
                if let Some(to) = self.road.neighbor(lane, side, car.s).filter(|&t| t != RAMP_LANE) {
                    let s_to = self.road.project(to, car.state.position, None).s;
                    let lead = self.neighbor_on_lane(to, s_to, car.state.position, Some(i), true, true);
                    let follow = self.neighbor_on_lane(to, s_to, car.state.position, Some(i), true, false);
                    if lead.is_none_or(|(g, _)| g > 10.0) && follow.is_none_or(|(g, _)| g > 10.0) {
                        lane = to;
                    }
                }
            }
            let car = &self.traffic[i];
            let s_lane = if lane == car.state.lane_id { car.s } else { self.road.project(lane, car.state.position, None).s };
            let mut leader = self.neighbor_on_lane(lane, s_lane, car.state.position, Some(i), true, true);
            if let Some(stop) = self.yield_gap(i, lane, s_lane) {
                if leader.is_none_or(|(g, _)| stop < g) {
                    leader = Some((stop, 0.0));
                }
            }
            let accel = self.idm.accel(car.state.speed, car.target_speed, leader);
            let local = self.road.project(lane, car.state.position, Some(s_lane));
            let steer = steer_to_lane(&car.state, &self.road.lanes[lane], local, self.cfg.steer_limit);
            out.push((accel, steer, lane));
        }
        out
    }

    /// Distance to the ring stop line when an approaching vehicle must yield.
    fn yield_gap(&self, i: usize, lane: usize, s: f64) -> Option<f64> {
        let (entry_s, join) = self.road.lanes[lane].ring_entry?;
        let stop = entry_s - 2.0;
        if s > stop || s < entry_s - 30.0 {
            return None;
        }
        let circulating = self.traffic.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, c)| &c.state).chain(std::iter::once(&self.ego.state));
        for v in circulating {
            let r = v.position.norm();
            let to_join = join - v.position;
            let on_ring = (r - road::RING_RADIUS).abs() < 3.0;
            if on_ring && to_join.norm() < 18.0 && to_join.dot(&heading_vec(v.heading)) > 0.0 {
                return Some((stop - s).max(0.0));
            }
        }
        None
    }

    fn arrivals(&mut self) {
        let p = self.cfg.spawn_rate * self.cfg.dt;
        let entries: Vec<(usize, f64)> = match self.cfg.task {
            Task::Highway => return,
            Task::Merge => vec![(0, 5.0), (1, 5.0)],
            Task::Roundabout => (0..4)
                .map(|a| {
                    let e = (a + 1 + self.rng.random_range(0..3)) % 4;
                    (route_index(a, e), 0.0)
                })
                .collect(),
        };
        for (lane, s) in entries {
            let draw: f64 = self.rng.random();
            if draw >= p || self.traffic.len() >= self.cfg.vehicle_count {
                continue;
            }
            let line = &self.road.lanes[lane].line;
            let pos = line.position(s, 0.0);
            let clear = self.traffic.iter().map(|c| &c.state).chain(std::iter::once(&self.ego.state)).all(|v| (v.position - pos).norm() > 25.0);
            if !clear {
                continue;
            }
            let speed = match self.cfg.task {
                Task::Merge => self.rng.random_range(20.0..26.0),
                _ => self.rng.random_range(8.0..12.0),
            };
            self.traffic.push(Car { state: VehicleState::new(pos, line.heading(s), speed, lane), s, target_speed: speed });
        }
    }

    pub fn step(&mut self, action: &Action) -> Result<StepResult> {
        if self.finished {
            return Err(Error::Usage("step called on a finished episode; call reset".into()));
        }
        let lane_before = self.ego.state.lane_id;
        let headway_before = self.ego_headway(lane_before);
        let (accel, steer, tracked) = match (*action, self.cfg.action_space) {
            (Action::Continuous { accel, steer }, ActionSpace::Continuous) => {
                let a = if accel.is_finite() { accel.clamp(-self.cfg.accel_limit, self.cfg.accel_limit) } else { 0.0 };
                let d = if steer.is_finite() { steer.clamp(-self.cfg.steer_limit, self.cfg.steer_limit) } else { 0.0 };
                (a, d, lane_before)
            }
            (Action::Meta(m), ActionSpace::Discrete) => {
                let mut lane = lane_before;
                match m {
                    MetaAction::LaneLeft => lane = self.road.neighbor(lane, Side::Left, self.ego.s).unwrap_or(lane),
                    MetaAction::LaneRight => lane = self.road.neighbor(lane, Side::Right, self.ego.s).unwrap_or(lane),
                    MetaAction::Faster => self.speed_level = (self.speed_level + 1).min(3),
                    MetaAction::Slower => self.speed_level = self.speed_level.saturating_sub(1),
                    MetaAction::Idle => {}
                }
                self.ego.target_speed = self.cfg.speed_levels()[self.speed_level];
                let s = if lane == lane_before { self.ego.s } else { self.road.project(lane, self.ego.state.position, None).s };
                let local = self.road.project(lane, self.ego.state.position, Some(s));
                let d = steer_to_lane(&self.ego.state, &self.road.lanes[lane], local, self.cfg.steer_limit);
                let a = tracking_accel(self.ego.state.speed, self.ego.target_speed, self.cfg.accel_limit);
                (a, d, lane)
            }
            _ => {
                return Err(Error::Usage(format!("action {action:?} does not match the {} action space", self.cfg.action_space)))
            }
        };

        let controls = self.traffic_controls();
        let old_pos = self.ego.state.position;
        self.ego.state.advance(accel, steer, self.cfg.dt);
        for (car, (a, d, lane)) in self.traffic.iter_mut().zip(controls) {
            car.state.advance(a, d, self.cfg.dt);
            if lane != car.state.lane_id {
                car.state.lane_id = lane;
                car.s = self.road.project(lane, car.state.position, None).s;
            } else {
                car.s = self.road.project(lane, car.state.position, Some(car.s)).s;
            }
        }
        let road = &self.road;
        self.traffic.retain(|c| c.s < road.lanes[c.state.lane_id].line.length() - 5.0 && c.state.is_finite());

        let lane_now = match self.cfg.action_space {
            ActionSpace::Continuous => self.occupied_lane(self.ego.state.position, tracked, self.ego.s),
            ActionSpace::Discrete => tracked,
        };
        let hint = if lane_now == lane_before { Some(self.ego.s) } else { None };
        let local = self.road.project(lane_now, self.ego.state.position, hint);
        self.ego.s = local.s;
        self.ego.state.lane_id = lane_now;
        self.arrivals();
        self.step_index += 1;
        self.speed_sum += self.ego.state.speed;

        let ego_box = self.ego.state.footprint();
        let hit = self.traffic.iter().any(|c| ego_box.overlaps(&c.state.footprint()));
        let off_road = !self.road.on_road(self.ego.state.position, 0.5);
        let collided = hit || off_road;
        let lane_heading = self.road.lanes[lane_now].line.heading(local.s);
        let goal = !collided
            && match self.cfg.task {
                Task::Highway => false,
                Task::Merge => {
                    self.ego.state.position.x > MERGE_RAMP_END + 10.0 && lane_now != RAMP_LANE && local.lateral.abs() < 1.0
                }
                Task::Roundabout => self.road.lanes[lane_now].ring_exit.is_some_and(|x| local.s >= x + 20.0),
            };
        let time_up = self.step_index >= self.cfg.time_limit;
        let terminated = collided || goal;
        let truncated = !terminated && time_up;
        let success = goal
            || (self.cfg.task == Task::Highway && truncated && {
                let avg = self.speed_sum / self.step_index as f64;
                avg >= self.cfg.speed_target.0 && avg <= self.cfg.speed_target.1
            });

        let headway = self.ego_headway(lane_now);
        let lane_changed = lane_now != lane_before;
        let inputs = RewardInputs {
            speed: self.ego.state.speed,
            headway,
            lane_changed,
            headway_gain: lane_changed && headway.unwrap_or(f64::INFINITY) > headway_before.unwrap_or(f64::INFINITY),
            progress: (self.ego.state.position - old_pos).dot(&heading_vec(lane_heading)),
            heading_error: wrap_angle(self.ego.state.heading - lane_heading),
            collided,
            success,
        };
        let (reward, terms) = reward_fn(&self.params, &inputs);
        self.finished = terminated || truncated;
        Ok(StepResult { observation: self.observe(), reward, terminated, truncated, collided, success, terms })
    }

    /// Hard-set the ego pose, for tests and scripted scenarios.
    pub fn set_ego(&mut self, state: VehicleState) {
        let s = self.road.project(state.lane_id, state.position, None).s;
        self.ego = Car { state, s, target_speed: self.ego.target_speed };
    }

    /// Replace the traffic with the given vehicles, each tracking its stored lane at its current speed.
    pub fn set_traffic(&mut self, vehicles: &[VehicleState]) {
        self.traffic = vehicles
            .iter()
            .map(|v| Car { state: *v, s: self.road.project(v.lane_id, v.position, None).s, target_speed: v.speed })
            .collect();
    }
}
