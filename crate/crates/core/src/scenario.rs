//! Synthetic scenarios: trajectories, CIR measurements, synthetic NLoS and
//! displacement measurements.
//!
//! The channel model is geometric. Every TRP sees a line-of-sight tap at the
//! propagation delay of the UE, rendered at its fractional position with a
//! windowed sinc, plus optional wall reflections computed with the image
//! method. NLoS behaviour is injected afterwards by [`apply_synthetic_nlos`],
//! which attenuates and delays blocks of `(TRP, frame)` cells.

use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dist2, dist3, Bounds, Point2, Point3, SPEED_OF_LIGHT};
use crate::rng::{derive_seed, stream_rng};

/// Orientation of a planar reflector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WallAxis {
    /// Plane `x = coordinate`.
    X,
    /// Plane `y = coordinate`.
    Y,
    /// Horizontal plane `z = coordinate` (floor or ceiling).
    Z,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reflector {
    pub axis: WallAxis,
    pub coordinate: f64,
    /// Amplitude reflection coefficient, `|coefficient| < 1`.
    pub coefficient: f64,
}

impl Reflector {
    fn mirror(&self, p: Point3) -> Point3 {
        match self.axis {
            WallAxis::X => [2.0 * self.coordinate - p[0], p[1], p[2]],
            WallAxis::Y => [p[0], 2.0 * self.coordinate - p[1], p[2]],
            WallAxis::Z => [p[0], p[1], 2.0 * self.coordinate - p[2]],
        }
    }

    fn same_side(&self, a: Point3, b: Point3) -> bool {
        let i = match self.axis {
            WallAxis::X => 0,
            WallAxis::Y => 1,
            WallAxis::Z => 2,
        };
        (a[i] - self.coordinate) * (b[i] - self.coordinate) > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelModel {
    /// Amplitude of the LoS tap at unit distance (or everywhere with power control).
    pub los_amplitude: f64,
    /// Constant LoS amplitude irrespective of distance (uplink power control).
    pub power_control: bool,
    /// Occupied bandwidth of the sounding pulse; `None` means the full sample rate.
    pub pulse_bandwidth_hz: Option<f64>,
    /// Half-width of the windowed-sinc kernel in samples.
    pub sinc_half_width: usize,
    pub carrier_hz: f64,
    pub reflectors: Vec<Reflector>,
}

impl Default for ChannelModel {
    fn default() -> Self {
        Self {
            los_amplitude: 1.0,
            power_control: true,
            pulse_bandwidth_hz: Some(100e6),
            sinc_half_width: 8,
            carrier_hz: 3.5e9,
            reflectors: Vec::new(),
        }
    }
}

/// Representation of the per-TRP channel vectors in a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SignalDomain {
    /// Time-domain CIR with zero delay at index 0.
    #[default]
    Cir,
    /// Frequency-domain CFR (unitary DFT of the CIR).
    Cfr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub trp_positions: Vec<Point3>,
    /// RU index (0-based) of every TRP.
    pub ru_assignment: Vec<usize>,
    /// Reference TRP of every RU.
    pub ref_trp_per_ru: Vec<usize>,
    pub n_fft: usize,
    pub sample_rate_hz: f64,
    /// Complex noise power per sample in dB relative to a unit-amplitude tap.
    /// `None` disables noise.
    #[serde(default)]
    pub noise_floor_db: Option<f64>,
    pub ue_height_m: f64,
    pub bounds: Bounds,
    #[serde(default)]
    pub channel: ChannelModel,
}

/// One TDoA slot: TRP `trp` measured against the reference of RU `ru`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TdoaEntry {
    pub trp: usize,
    pub reference: usize,
    pub ru: usize,
}

/// Fixed ordering of the `M - K` TDoAs: by RU, then TRP index, skipping references.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TdoaLayout {
    pub entries: Vec<TdoaEntry>,
}

impl TdoaLayout {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Scenario {
    pub fn num_trps(&self) -> usize {
        self.trp_positions.len()
    }

    pub fn num_rus(&self) -> usize {
        self.ref_trp_per_ru.len()
    }

    pub fn trps_of_ru(&self, ru: usize) -> Vec<usize> {
        (0..self.num_trps())
            .filter(|&m| self.ru_assignment[m] == ru)
            .collect()
    }

    pub fn reference_of(&self, trp: usize) -> usize {
        self.ref_trp_per_ru[self.ru_assignment[trp]]
    }

    /// Meters of propagation per CIR sample (`c / f_s`).
    pub fn meters_per_sample(&self) -> f64 {
        SPEED_OF_LIGHT / self.sample_rate_hz
    }

    pub fn tdoa_layout(&self) -> TdoaLayout {
        let mut entries = Vec::with_capacity(self.num_trps() - self.num_rus());
        for ru in 0..self.num_rus() {
            let reference = self.ref_trp_per_ru[ru];
            for trp in self.trps_of_ru(ru) {
                if trp != reference {
                    entries.push(TdoaEntry { trp, reference, ru });
                }
            }
        }
        TdoaLayout { entries }
    }

    pub fn ue_point(&self, u: Point2) -> Point3 {
        [u[0], u[1], self.ue_height_m]
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.num_trps();
        let k = self.num_rus();
        if m == 0 || k == 0 {
            return Err(Error::Config("scenario needs at least one RU and TRP".into()));
        }
        if self.ru_assignment.len() != m {
            return Err(Error::Config(format!(
                "ru_assignment has {} entries for {m} TRPs",
                self.ru_assignment.len()
            )));
        }
        for (trp, &ru) in self.ru_assignment.iter().enumerate() {
            if ru >= k {
                return Err(Error::Config(format!("TRP {trp} assigned to unknown RU {ru}")));
            }
        }
        for ru in 0..k {
            if self.trps_of_ru(ru).len() < 2 {
                return Err(Error::Config(format!("RU {ru} has fewer than 2 TRPs")));
            }
            let r = self.ref_trp_per_ru[ru];
            if r >= m || self.ru_assignment[r] != ru {
                return Err(Error::Config(format!(
                    "reference TRP {r} is not assigned to RU {ru}"
                )));
            }
        }
        for (trp, p) in self.trp_positions.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) || p[2] <= 0.0 {
                return Err(Error::Config(format!(
                    "TRP {trp} must have finite coordinates and positive height"
                )));
            }
        }
        if self.n_fft < 8 {
            return Err(Error::Config("n_fft must be at least 8".into()));
        }
        if !(self.sample_rate_hz > 0.0) || !self.sample_rate_hz.is_finite() {
            return Err(Error::Config("sample_rate_hz must be positive".into()));
        }
        if !self.ue_height_m.is_finite() {
            return Err(Error::Config("ue_height_m must be finite".into()));
        }
        if !self.bounds.is_valid() {
            return Err(Error::Config("bounds must be a nonempty rectangle".into()));
        }
        let ch = &self.channel;
        if !(ch.los_amplitude > 0.0) || ch.sinc_half_width == 0 {
            return Err(Error::Config(
                "channel needs positive amplitude and kernel width".into(),
            ));
        }
        if let Some(bw) = ch.pulse_bandwidth_hz {
            if !(bw > 0.0 && bw <= self.sample_rate_hz) {
                return Err(Error::Config(
                    "pulse bandwidth must lie in (0, sample_rate]".into(),
                ));
            }
        }
        if ch.reflectors.iter().any(|r| !(r.coefficient.abs() < 1.0)) {
            return Err(Error::Config("reflection coefficients must satisfy |r| < 1".into()));
        }
        Ok(())
    }

    /// The desk-scale reference scenario: a 40 m x 20 m hall watched by two
    /// RUs with four TRPs each at 8 m height, 122.88 MS/s, 100 MHz pulse.
    pub fn desk() -> Self {
        let h = 8.0;
        Self {
            trp_positions: vec![
                [-5.0, -5.0, h],
                [45.0, -5.0, h],
                [45.0, 25.0, h],
                [-5.0, 25.0, h],
                [20.0, -8.0, h],
                [48.0, 10.0, h],
                [20.0, 28.0, h],
                [-8.0, 10.0, h],
            ],
            ru_assignment: vec![0, 0, 0, 0, 1, 1, 1, 1],
            ref_trp_per_ru: vec![0, 4],
            n_fft: 128,
            sample_rate_hz: 122.88e6,
            noise_floor_db: Some(-15.0),
            ue_height_m: 1.5,
            bounds: Bounds::new([0.0, 0.0], [40.0, 20.0]),
            channel: ChannelModel {
                reflectors: vec![
                    Reflector {
                        axis: WallAxis::X,
                        coordinate: -12.0,
                        coefficient: 0.4,
                    },
                    Reflector {
                        axis: WallAxis::Y,
                        coordinate: 32.0,
                        coefficient: 0.4,
                    },
                    Reflector {
                        axis: WallAxis::Z,
                        coordinate: 0.0,
                        coefficient: 0.6,
                    },
                ],
                ..ChannelModel::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub timestamps: Vec<f64>,
    pub positions: Vec<Point2>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn validate(&self, bounds: &Bounds, max_speed: f64) -> Result<()> {
        if self.timestamps.len() != self.positions.len() {
            return Err(Error::invalid("trajectory timestamp/position lengths differ"));
        }
        for (i, p) in self.positions.iter().enumerate() {
            if !bounds.contains(*p) {
                return Err(Error::invalid(format!("trajectory sample {i} outside bounds")));
            }
        }
        for i in 1..self.len() {
            let dt = self.timestamps[i] - self.timestamps[i - 1];
            if !(dt > 0.0) {
                return Err(Error::invalid(format!(
                    "timestamps not strictly increasing at {i}"
                )));
            }
            let v = dist2(self.positions[i], self.positions[i - 1]) / dt;
            if v > max_speed * (1.0 + 1e-9) {
                return Err(Error::invalid(format!(
                    "speed {v:.3} m/s at sample {i} exceeds {max_speed} m/s"
                )));
            }
        }
        Ok(())
    }
}

/// Constant-speed piecewise-linear walk through `waypoints`, sampled every `dt`.
///
/// `jitter_sigma_m` adds seeded Gaussian position noise (clamped to the bounds);
/// without jitter the seed is unused.
pub fn generate_trajectory(
    scenario: &Scenario,
    waypoints: &[Point2],
    speed: f64,
    dt: f64,
    jitter_sigma_m: Option<f64>,
    rng_seed: u64,
) -> Result<Trajectory> {
    if waypoints.is_empty() {
        return Err(Error::invalid("at least one waypoint is required"));
    }
    if !(speed > 0.0) || !(dt > 0.0) {
        return Err(Error::invalid("speed and dt must be positive"));
    }
    if let Some(index) = waypoints.iter().position(|w| !scenario.bounds.contains(*w)) {
        return Err(Error::WaypointOutOfBounds { index });
    }

    let mut cumulative = vec![0.0];
    for w in waypoints.windows(2) {
        let last = *cumulative.last().unwrap();
        cumulative.push(last + dist2(w[0], w[1]));
    }
    let total = *cumulative.last().unwrap();
    let step = speed * dt;
    let n = ((total / step) + 1e-9).floor() as usize + 1;

    let mut positions = Vec::with_capacity(n);
    let mut seg = 0;
    for i in 0..n {
        let s = (i as f64 * step).min(total);
        while seg + 1 < waypoints.len() - 1 && s > cumulative[seg + 1] {
            seg += 1;
        }
        let p = if waypoints.len() == 1 {
            waypoints[0]
        } else {
            let len = cumulative[seg + 1] - cumulative[seg];
            let f = if len > 0.0 {
                ((s - cumulative[seg]) / len).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (a, b) = (waypoints[seg], waypoints[seg + 1]);
            [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]
        };
        positions.push(p);
    }

    if let Some(sigma) = jitter_sigma_m.filter(|s| *s > 0.0) {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
        let b = scenario.bounds;
        for (i, p) in positions.iter_mut().enumerate() {
            let mut rng = stream_rng(derive_seed(rng_seed, "trajectory-jitter"), i as u64);
            for axis in 0..2 {
                p[axis] = (p[axis] + normal.sample(&mut rng)).clamp(b.min[axis], b.max[axis]);
            }
        }
    }

    let timestamps = (0..n).map(|i| i as f64 * dt).collect();
    Ok(Trajectory {
        timestamps,
        positions,
    })
}

/// One global channel snapshot: `M x N_fft` complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CirFrame {
    pub rows: Array2<Complex64>,
}

impl CirFrame {
    pub fn zeros(m: usize, n_fft: usize) -> Self {
        Self {
            rows: Array2::zeros((m, n_fft)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CirDataset {
    pub frames: Vec<CirFrame>,
    pub timestamps: Vec<f64>,
    /// Ground-truth LoS state, `M x T`.
    pub los_labels: Array2<bool>,
    pub domain: SignalDomain,
}

impl CirDataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn num_trps(&self) -> usize {
        self.los_labels.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != self.timestamps.len() {
            return Err(Error::invalid("frame count differs from timestamp count"));
        }
        let m = self.num_trps();
        if self.los_labels.ncols() != self.frames.len() {
            return Err(Error::invalid("los_labels width differs from frame count"));
        }
        if let Some(i) = self.frames.iter().position(|f| f.rows.nrows() != m) {
            return Err(Error::invalid(format!("frame {i} does not have {m} rows")));
        }
        Ok(())
    }
}

/// Windowed-sinc pulse sampled at offset `x` (samples) from its center.
pub(crate) fn pulse(x: f64, beta: f64, half_width: f64) -> f64 {
    if x.abs() >= half_width {
        return 0.0;
    }
    let window = 0.5 + 0.5 * (PI * x / half_width).cos();
    let arg = PI * beta * x;
    let sinc = if arg.abs() < 1e-12 { 1.0 } else { arg.sin() / arg };
    sinc * window
}

fn render_tap(row: &mut [Complex64], delay: f64, amplitude: Complex64, beta: f64, half_width: f64) {
    let n = row.len() as isize;
    let lo = (delay - half_width).ceil() as isize;
    let hi = (delay + half_width).floor() as isize;
    for idx in lo.max(0)..=hi.min(n - 1) {
        let w = pulse(idx as f64 - delay, beta, half_width);
        row[idx as usize] += amplitude * w;
    }
}

/// Renders the noiseless-or-noisy CIR of every `(TRP, frame)` cell.
pub fn synthesize_cir(
    scenario: &Scenario,
    trajectory: &Trajectory,
    rng_seed: u64,
) -> Result<CirDataset> {
    synthesize(scenario, trajectory, rng_seed, SignalDomain::Cir)
}

/// Same channel as [`synthesize_cir`] but stored as CFRs, so preprocessing
/// has to go through the centered IDFT.
pub fn synthesize_cfr(
    scenario: &Scenario,
    trajectory: &Trajectory,
    rng_seed: u64,
) -> Result<CirDataset> {
    synthesize(scenario, trajectory, rng_seed, SignalDomain::Cfr)
}

fn synthesize(
    scenario: &Scenario,
    trajectory: &Trajectory,
    rng_seed: u64,
    domain: SignalDomain,
) -> Result<CirDataset> {
    scenario.validate()?;
    let m = scenario.num_trps();
    let n = scenario.n_fft;
    let ch = &scenario.channel;
    let beta = ch.pulse_bandwidth_hz.unwrap_or(scenario.sample_rate_hz) / scenario.sample_rate_hz;
    let half_width = ch.sinc_half_width as f64;
    let per_sample = scenario.meters_per_sample();
    // the centered IDFT puts zero delay at N/2; keep the response in the upper half
    let max_delay = match domain {
        SignalDomain::Cir => (n - 1) as f64,
        SignalDomain::Cfr => (n / 2 - 1) as f64,
    };
    let noise_sigma = scenario
        .noise_floor_db
        .map(|db| (10f64.powf(db / 10.0) / 2.0).sqrt());
    let noise_seed = derive_seed(rng_seed, "cir-noise");
    let fft = matches!(domain, SignalDomain::Cfr)
        .then(|| rustfft::FftPlanner::<f64>::new().plan_fft_forward(n));

    let frames: Vec<CirFrame> = trajectory
        .positions
        .par_iter()
        .enumerate()
        .map(|(t, u)| {
            let ue = scenario.ue_point(*u);
            let mut frame = CirFrame::zeros(m, n);
            for (trp, x) in scenario.trp_positions.iter().enumerate() {
                let d = dist3(*x, ue);
                let delay = d / per_sample;
                if delay > max_delay {
                    return Err(Error::DelayOutOfWindow {
                        trp,
                        frame: t,
                        delay_samples: delay,
                        n_fft: n,
                    });
                }
                let amp = if ch.power_control {
                    ch.los_amplitude
                } else {
                    ch.los_amplitude / d.max(1.0)
                };
                let mut row = frame.rows.row_mut(trp);
                let row = row.as_slice_mut().expect("standard layout");
                render_tap(row, delay, carrier_phasor(ch.carrier_hz, d) * amp, beta, half_width);
                for wall in &ch.reflectors {
                    if !wall.same_side(*x, ue) {
                        continue;
                    }
                    let d_r = dist3(wall.mirror(*x), ue);
                    let a_r = amp * wall.coefficient * (d / d_r);
                    render_tap(
                        row,
                        d_r / per_sample,
                        carrier_phasor(ch.carrier_hz, d_r) * a_r,
                        beta,
                        half_width,
                    );
                }
                if let Some(sigma) = noise_sigma {
                    let mut rng = stream_rng(noise_seed, (t * m + trp) as u64);
                    let normal = Normal::new(0.0, sigma).expect("finite sigma");
                    for v in row.iter_mut() {
                        *v += Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng));
                    }
                }
                if let Some(fft) = &fft {
                    fft.process(row);
                    let scale = 1.0 / (n as f64).sqrt();
                    row.iter_mut().for_each(|v| *v *= scale);
                }
            }
            Ok(frame)
        })
        .collect::<Result<_>>()?;

    Ok(CirDataset {
        los_labels: Array2::from_elem((m, frames.len()), true),
        frames,
        timestamps: trajectory.timestamps.clone(),
        domain,
    })
}

fn carrier_phasor(carrier_hz: f64, distance: f64) -> Complex64 {
    let cycles = (carrier_hz * distance / SPEED_OF_LIGHT).fract();
    Complex64::from_polar(1.0, -2.0 * PI * cycles)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NlosConfig {
    /// Attenuation range in dB, drawn uniformly per modified cell.
    pub attenuation_db: [f64; 2],
    /// Inclusive range of integer delays (samples) applied to modified cells.
    pub shift_samples: [usize; 2],
    /// Length of the contiguous NLoS blocks per TRP; 1 gives i.i.d. cells.
    pub run_length: usize,
}

impl Default for NlosConfig {
    fn default() -> Self {
        Self {
            attenuation_db: [20.0, 30.0],
            shift_samples: [10, 20],
            run_length: 20,
        }
    }
}

/// Number of cells turned NLoS for a LoS ratio.
pub fn nlos_cell_count(r_los: f64, cells: usize) -> usize {
    (((1.0 - r_los) * cells as f64) + 1e-9).floor() as usize
}

/// Turns exactly `floor((1 - r_los) * M * T)` cells into synthetic NLoS
/// measurements: the row is scaled down and delayed, and the label cleared.
pub fn apply_synthetic_nlos(
    dataset: &CirDataset,
    r_los: f64,
    config: &NlosConfig,
    rng_seed: u64,
) -> Result<CirDataset> {
    if !(0.0..=1.0).contains(&r_los) {
        return Err(Error::invalid(format!("r_los {r_los} outside [0, 1]")));
    }
    let [a_lo, a_hi] = config.attenuation_db;
    let [s_lo, s_hi] = config.shift_samples;
    if !(a_lo > 0.0 && a_hi >= a_lo) || s_hi < s_lo || config.run_length == 0 {
        return Err(Error::invalid(
            "NLoS ranges must be nonempty with positive attenuation",
        ));
    }
    dataset.validate()?;
    let m = dataset.num_trps();
    let t_len = dataset.len();
    let target = nlos_cell_count(r_los, m * t_len);

    let mut out = dataset.clone();
    if target == 0 {
        return Ok(out);
    }

    // Each TRP timeline is cut into blocks on a grid with a random phase.
    let mut rng = stream_rng(derive_seed(rng_seed, "nlos-blocks"), 0);
    let run = config.run_length;
    let mut blocks: Vec<(usize, usize, usize)> = Vec::new();
    for trp in 0..m {
        let phase = rng.random_range(0..run);
        let mut start = 0;
        let mut end = if phase == 0 { run } else { phase };
        while start < t_len {
            end = end.min(t_len);
            blocks.push((trp, start, end));
            start = end;
            end = start + run;
        }
    }
    blocks.shuffle(&mut rng);

    let mut selected = Vec::with_capacity(target);
    for &(trp, start, end) in &blocks {
        let remaining = target - selected.len();
        if remaining == 0 {
            break;
        }
        let take = (end - start).min(remaining);
        selected.extend((start..start + take).map(|t| (trp, t)));
    }

    let cell_seed = derive_seed(rng_seed, "nlos-cells");
    for (trp, t) in selected {
        let mut crng = stream_rng(cell_seed, (t * m + trp) as u64);
        let atten_db = if a_hi > a_lo {
            crng.random_range(a_lo..=a_hi)
        } else {
            a_lo
        };
        let shift = crng.random_range(s_lo..=s_hi);
        let gain = 10f64.powf(-atten_db / 20.0);

        let mut row = out.frames[t].rows.row_mut(trp);
        let n = row.len();
        let peak = row
            .iter()
            .enumerate()
            .fold((0, -1.0), |best, (i, v)| {
                let a = v.norm();
                if a > best.1 { (i, a) } else { best }
            })
            .0;
        let shift = shift.min(n - 1 - peak);
        let original = row.to_vec();
        for i in 0..n {
            row[(i + shift) % n] = original[i] * gain;
        }
        out.los_labels[[trp, t]] = false;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisplacementPair {
    pub i: usize,
    pub j: usize,
    pub d_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplacementSet {
    pub pairs: Vec<DisplacementPair>,
    pub epsilon_s: f64,
    pub noise_sigma_m: f64,
    pub bias_rate_m_per_s: f64,
}

/// Noisy, drifting displacement measurements for every admissible pair
/// `i < j` with `t_j - t_i <= epsilon_s`.
pub fn derive_displacements(
    trajectory: &Trajectory,
    epsilon_s: f64,
    noise_sigma_m: f64,
    bias_rate_m_per_s: f64,
    rng_seed: u64,
) -> Result<DisplacementSet> {
    if !(epsilon_s > 0.0) {
        return Err(Error::invalid("epsilon_s must be positive"));
    }
    if !(noise_sigma_m >= 0.0) {
        return Err(Error::invalid("noise sigma must be nonnegative"));
    }
    let seed = derive_seed(rng_seed, "displacement");
    let normal = (noise_sigma_m > 0.0).then(|| Normal::new(0.0, noise_sigma_m).unwrap());
    let ts = &trajectory.timestamps;
    let n = ts.len();
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let dt = (ts[j] - ts[i]).abs();
            if dt > epsilon_s {
                if ts[j] > ts[i] {
                    break;
                }
                continue;
            }
            let truth = dist2(trajectory.positions[j], trajectory.positions[i]);
            let noise = match &normal {
                Some(nd) => nd.sample(&mut stream_rng(seed, (i * n + j) as u64)),
                None => 0.0,
            };
            let d_hat = (truth + bias_rate_m_per_s * dt + noise).max(0.0);
            pairs.push(DisplacementPair { i, j, d_hat });
        }
    }
    Ok(DisplacementSet {
        pairs,
        epsilon_s,
        noise_sigma_m,
        bias_rate_m_per_s,
    })
}

/// Index of the largest magnitude in each row (ties to the lowest index).
#[cfg(test)]
fn row_argmax(rows: &Array2<Complex64>) -> Vec<usize> {
    rows.axis_iter(ndarray::Axis(0))
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, -1.0), |best, (i, v)| {
                    let a = v.norm();
                    if a > best.1 { (i, a) } else { best }
                })
                .0
        })
        .collect()
}
