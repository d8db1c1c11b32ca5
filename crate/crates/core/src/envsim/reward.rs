//! Per-step reward: weighted shaping terms plus collision and success terms.

/// Shaping coefficients; every term is bounded in magnitude by one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardWeights {
    pub speed: f64,
    pub safe_distance: f64,
    pub lane_change: f64,
    pub progress: f64,
    pub heading: f64,
    pub survival: f64,
}

impl RewardWeights {
    pub fn abs_sum(&self) -> f64 {
        [self.speed, self.safe_distance, self.lane_change, self.progress, self.heading, self.survival]
            .iter()
            .map(|w| w.abs())
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SafeDistanceMode {
    /// Only tailgating is penalized.
    Penalty,
    /// Comfortable headway is rewarded, tailgating penalized.
    Symmetric,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardParams {
    pub weights: RewardWeights,
    pub shaping_weight: f64,
    pub collision_penalty: f64,
    pub success_reward: f64,
    pub speed_target: (f64, f64),
    pub safe_headway: f64,
    pub safe_distance_mode: SafeDistanceMode,
    /// Count a lane change only when it lengthens the headway.
    pub lane_change_needs_gain: bool,
    pub dt: f64,
}

/// Quantities measured on the world after a step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RewardInputs {
    pub speed: f64,
    /// Time headway to the leader in seconds; `None` for a free lane.
    pub headway: Option<f64>,
    pub lane_changed: bool,
    pub headway_gain: bool,
    /// Arc length advanced along the route this step, meters.
    pub progress: f64,
    pub heading_error: f64,
    pub collided: bool,
    pub success: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RewardTerms {
    pub speed: f64,
    pub safe_distance: f64,
    pub lane_change: f64,
    pub progress: f64,
    pub heading: f64,
    pub survival: f64,
}

/// Unit inside the target band, falling off linearly outside it.
pub fn speed_term(speed: f64, (lo, hi): (f64, f64)) -> f64 {
    if speed < lo {
        (speed / lo).max(0.0)
    } else if speed <= hi {
        1.0
    } else {
        (1.0 - (speed - hi) / (hi - lo)).max(0.0)
    }
}

pub fn shaping_terms(p: &RewardParams, x: &RewardInputs) -> RewardTerms {
    let safe = match x.headway {
        None => 1.0,
        Some(h) => ((h - p.safe_headway) / p.safe_headway).clamp(-1.0, 1.0),
    };
    let safe = match p.safe_distance_mode {
        SafeDistanceMode::Penalty => safe.min(0.0),
        SafeDistanceMode::Symmetric => safe,
    };
    let lane_change = if x.lane_changed && (!p.lane_change_needs_gain || x.headway_gain) { 1.0 } else { 0.0 };
    RewardTerms {
        speed: speed_term(x.speed, p.speed_target),
        safe_distance: safe,
        lane_change,
        progress: (x.progress / (p.speed_target.1 * p.dt)).clamp(-1.0, 1.0),
        heading: x.heading_error.cos(),
        survival: if x.collided { 0.0 } else { 1.0 },
    }
}

/// `shaping_weight·Σ w_k·term_k + collision_penalty·[collided] + success_reward·[success]`.
pub fn reward_fn(p: &RewardParams, x: &RewardInputs) -> (f64, RewardTerms) {
    let t = shaping_terms(p, x);
    let w = &p.weights;
    let shaped = w.speed * t.speed
        + w.safe_distance * t.safe_distance
        + w.lane_change * t.lane_change
        + w.progress * t.progress
        + w.heading * t.heading
        + w.survival * t.survival;
    let mut r = p.shaping_weight * shaped;
    if x.collided {
        r += p.collision_penalty;
    }
    if x.success {
        r += p.success_reward;
    }
    (r, t)
}

/// Largest attainable |reward| for these parameters.
pub fn reward_bound(p: &RewardParams) -> f64 {
    p.collision_penalty.abs() + p.success_reward.abs() + p.shaping_weight.abs() * p.weights.abs_sum()
}
