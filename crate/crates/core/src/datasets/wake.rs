//! Steady-state wind-farm simulator: Jensen top-hat wakes with
//! root-sum-square superposition and a capped cubic power curve.
//!
//! Positions are `(east, north)` in meters. Angles are bearings in degrees
//! clockwise from north; the wind direction is the bearing the wind comes
//! from, and a turbine's yaw is the bearing its rotor faces.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TurbineSpec {
    pub rotor_diameter: f64,
    pub rated_power: f64,
    pub power_coefficient: f64,
    pub air_density: f64,
}

impl Default for TurbineSpec {
    /// A 5 MW turbine with a 126 m rotor.
    fn default() -> Self {
        Self {
            rotor_diameter: 126.0,
            rated_power: 5.0e6,
            power_coefficient: 0.48,
            air_density: 1.225,
        }
    }
}

impl TurbineSpec {
    pub fn rotor_radius(&self) -> f64 {
        self.rotor_diameter / 2.0
    }

    /// `min(rated, ½ρA·Cp·v³)`.
    pub fn power(&self, v: f64) -> f64 {
        let area = std::f64::consts::PI * self.rotor_radius().powi(2);
        (0.5 * self.air_density * area * self.power_coefficient * v.max(0.0).powi(3)).min(self.rated_power)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WakeParams {
    /// Axial induction factor `a`.
    pub induction: f64,
    /// Wake expansion coefficient `k`.
    pub expansion: f64,
}

impl Default for WakeParams {
    fn default() -> Self {
        Self {
            induction: 1.0 / 3.0,
            expansion: 0.05,
        }
    }
}

impl WakeParams {
    /// Deficit fraction at a point `along` meters downstream of a rotor of
    /// radius `r0` and `across` meters off its axis; 0 outside the cone.
    pub fn deficit(&self, r0: f64, along: f64, across: f64) -> f64 {
        if along <= 0.0 {
            return 0.0;
        }
        let radius = r0 + self.expansion * along;
        if across.abs() >= radius {
            return 0.0;
        }
        2.0 * self.induction * (r0 / radius).powi(2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FarmLayout {
    pub positions: Vec<[f64; 2]>,
    pub turbine: TurbineSpec,
}

impl FarmLayout {
    pub fn new(positions: Vec<[f64; 2]>, turbine: TurbineSpec) -> Result<Self> {
        let layout = Self { positions, turbine };
        layout.validate()?;
        Ok(layout)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("turbine position".into()));
        }
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                if distance(self.positions[i], self.positions[j]) <= 0.0 {
                    return Err(Error::Precondition(format!("turbines {i} and {j} coincide")));
                }
            }
        }
        Ok(())
    }

    pub fn translated(&self, by: [f64; 2]) -> Self {
        Self {
            positions: self.positions.iter().map(|p| [p[0] + by[0], p[1] + by[1]]).collect(),
            turbine: self.turbine,
        }
    }
}

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Bearing of the vector from `a` to `b`, degrees clockwise from north in
/// `[0, 360)`.
pub fn bearing(a: [f64; 2], b: [f64; 2]) -> f64 {
    (b[0] - a[0]).atan2(b[1] - a[1]).to_degrees().rem_euclid(360.0)
}

/// `a − b` wrapped to `(−180, 180]`.
pub fn angle_difference(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    if d > 180.0 {
        d - 360.0
    } else {
        d
    }
}

/// Uniformly scattered turbines in an `extent × extent` square, at least
/// `min_spacing` apart, by rejection sampling.
pub fn random_layout<R: Rng + ?Sized>(rng: &mut R, n: usize, min_spacing: f64, extent: f64, turbine: TurbineSpec) -> Result<FarmLayout> {
    let mut positions: Vec<[f64; 2]> = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while positions.len() < n {
        attempts += 1;
        if attempts > 10_000 * n.max(1) {
            return Err(Error::Precondition(format!(
                "cannot place {n} turbines {min_spacing} m apart in {extent} m"
            )));
        }
        let p = [rng.random_range(0.0..extent), rng.random_range(0.0..extent)];
        if positions.iter().all(|&q| distance(p, q) >= min_spacing) {
            positions.push(p);
        }
    }
    FarmLayout::new(positions, turbine)
}

/// Inflow conditions and per-turbine outputs of one steady state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FarmSnapshot {
    pub wind_speed: f64,
    pub wind_direction: f64,
    pub yaws: Vec<f64>,
    pub speed_mean: Vec<f64>,
    pub speed_std: Vec<f64>,
    pub power: Vec<f64>,
}

/// Effective wind at every turbine. A yawed rotor sheds a deficit scaled
/// by `cos² γ` and sees the wind component `v cos γ`, where `γ` is its
/// misalignment; the speed spread it records is `v |sin γ|`.
pub fn simulate_wake(layout: &FarmLayout, wind_speed: f64, direction: f64, yaws: &[f64], params: &WakeParams) -> Result<FarmSnapshot> {
    if yaws.len() != layout.len() {
        return Err(Error::Dimension(format!("{} yaws for {} turbines", yaws.len(), layout.len())));
    }
    if !(wind_speed >= 0.0 && wind_speed.is_finite() && direction.is_finite()) {
        return Err(Error::Precondition(format!("invalid inflow {wind_speed} m/s from {direction}")));
    }
    let misalign: Vec<f64> = yaws.iter().map(|&y| angle_difference(y, direction)).collect();
    if let Some(i) = misalign.iter().position(|g| !(g.abs() < 90.0)) {
        return Err(Error::Precondition(format!("turbine {i} faces away from the wind")));
    }
    let theta = direction.to_radians();
    let down = [-theta.sin(), -theta.cos()];
    let r0 = layout.turbine.rotor_radius();
    let n = layout.len();
    let mut snap = FarmSnapshot {
        wind_speed,
        wind_direction: direction,
        yaws: yaws.to_vec(),
        speed_mean: Vec::with_capacity(n),
        speed_std: Vec::with_capacity(n),
        power: Vec::with_capacity(n),
    };
    for j in 0..n {
        let mut sq = 0.0;
        for i in (0..n).filter(|&i| i != j) {
            let d = [layout.positions[j][0] - layout.positions[i][0], layout.positions[j][1] - layout.positions[i][1]];
            let along = d[0] * down[0] + d[1] * down[1];
            let across = d[0] * down[1] - d[1] * down[0];
            let delta = params.deficit(r0, along, across) * misalign[i].to_radians().cos().powi(2);
            sq += delta * delta;
        }
        let v = wind_speed * (1.0 - sq.sqrt()).max(0.0);
        let g = misalign[j].to_radians();
        snap.speed_mean.push(v);
        snap.speed_std.push(v * g.sin().abs());
        snap.power.push(layout.turbine.power(v * g.cos()));
    }
    Ok(snap)
}

/// Rotates positions clockwise by `alpha` degrees about the origin and
/// shifts every bearing by `alpha`. Wake outputs are left as they are.
pub fn rotate(layout: &FarmLayout, snapshot: &FarmSnapshot, alpha: f64) -> (FarmLayout, FarmSnapshot) {
    let (s, c) = alpha.to_radians().sin_cos();
    let positions = layout
        .positions
        .iter()
        .map(|&[x, y]| [x * c + y * s, -x * s + y * c])
        .collect();
    let shift = |a: f64| (a + alpha).rem_euclid(360.0);
    let snap = FarmSnapshot {
        wind_direction: shift(snapshot.wind_direction),
        yaws: snapshot.yaws.iter().map(|&y| shift(y)).collect(),
        ..snapshot.clone()
    };
    (
        FarmLayout {
            positions,
            turbine: layout.turbine,
        },
        snap,
    )
}

/// [`rotate`] by an angle drawn uniformly from `[0, 360)`.
pub fn rotate_augment<R: Rng + ?Sized>(rng: &mut R, layout: &FarmLayout, snapshot: &FarmSnapshot) -> (FarmLayout, FarmSnapshot, f64) {
    let alpha = rng.random_range(0.0..360.0);
    let (l, s) = rotate(layout, snapshot, alpha);
    (l, s, alpha)
}

/// Inflow distribution of generated snapshots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InflowSpec {
    pub speed_min: f64,
    pub speed_max: f64,
    /// Standard deviation of per-turbine yaw error, degrees.
    pub yaw_noise: f64,
}

impl Default for InflowSpec {
    fn default() -> Self {
        Self {
            speed_min: 4.0,
            speed_max: 14.0,
            yaw_noise: 5.0,
        }
    }
}

impl InflowSpec {
    /// Speed, direction and noisy yaws of one snapshot.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R, turbines: usize) -> (f64, f64, Vec<f64>) {
        let speed = rng.random_range(self.speed_min..self.speed_max);
        let direction = rng.random_range(0.0..360.0);
        let noise = Normal::new(0.0, self.yaw_noise).expect("yaw noise is finite and nonnegative");
        let yaws = (0..turbines)
            .map(|_| (direction + noise.sample(rng).clamp(-89.0, 89.0)).rem_euclid(360.0))
            .collect();
        (speed, direction, yaws)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(dx: f64, dy: f64) -> FarmLayout {
        FarmLayout::new(vec![[0.0, 0.0], [dx, dy]], TurbineSpec::default()).unwrap()
    }

    #[test]
    fn bearings_run_clockwise_from_north() {
        assert_eq!(bearing([0.0, 0.0], [0.0, 5.0]), 0.0);
        assert!((bearing([0.0, 0.0], [1000.0, 0.0]) - 90.0).abs() < 1e-12);
        assert!((bearing([0.0, 0.0], [0.0, -1.0]) - 180.0).abs() < 1e-12);
        assert!((bearing([0.0, 0.0], [-1.0, 0.0]) - 270.0).abs() < 1e-12);
        assert_eq!(angle_difference(350.0, 10.0), -20.0);
        assert_eq!(angle_difference(10.0, 350.0), 20.0);
    }

    #[test]
    fn lone_turbine_sees_free_stream() {
        let l = FarmLayout::new(vec![[3.0, 4.0]], TurbineSpec::default()).unwrap();
        let s = simulate_wake(&l, 9.0, 123.0, &[123.0], &WakeParams::default()).unwrap();
        assert_eq!(s.speed_mean, vec![9.0]);
        assert_eq!(s.speed_std, vec![0.0]);
    }

    #[test]
    fn aligned_pair_at_five_diameters() {
        // wind from the west, second turbine 630 m east: 2a (r0/(r0+k·630))² = 8/27
        let l = pair(630.0, 0.0);
        let s = simulate_wake(&l, 10.0, 270.0, &[270.0, 270.0], &WakeParams::default()).unwrap();
        assert_eq!(s.speed_mean[0], 10.0);
        assert!((s.speed_mean[1] - 10.0 * (1.0 - 8.0 / 27.0)).abs() < 1e-12);
    }

    #[test]
    fn crosswind_neighbour_is_untouched() {
        let l = pair(0.0, 400.0);
        let s = simulate_wake(&l, 10.0, 270.0, &[270.0, 270.0], &WakeParams::default()).unwrap();
        assert_eq!(s.speed_mean, vec![10.0, 10.0]);
    }

    #[test]
    fn power_curve_caps_at_rating() {
        let t = TurbineSpec::default();
        assert_eq!(t.power(25.0), t.rated_power);
        let v: f64 = 6.0;
        let expected = 0.5 * 1.225 * std::f64::consts::PI * 63.0 * 63.0 * 0.48 * v.powi(3);
        assert!((t.power(v) - expected).abs() < 1e-6);
    }

    #[test]
    fn rejects_turbines_facing_away() {
        let l = pair(630.0, 0.0);
        assert!(simulate_wake(&l, 10.0, 270.0, &[270.0, 90.0], &WakeParams::default()).is_err());
        assert!(FarmLayout::new(vec![[1.0, 1.0], [1.0, 1.0]], TurbineSpec::default()).is_err());
    }
}
