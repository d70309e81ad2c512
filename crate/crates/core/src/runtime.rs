//! Closed-loop rollouts of a synthesized controller.
//!
//! [`simulate_monolithic`] applies `u = K y` directly. [`simulate_distributed`]
//! runs the factored controller as two logical nodes: a sensor node that
//! encodes measurements into scalar messages and an actuator node that
//! decodes them, connected by an in-process channel. Both nodes keep access
//! logs so tests can confirm neither ever looks ahead in time.

use std::io::Write;
use std::sync::mpsc::{channel, Receiver, Sender};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::block::BlockLowerTriangular;
use crate::error::{Error, Result};
use crate::factorization::{verify_causality, CausalFactorization};
use crate::problem::{BoxSet, HPolytope, SynthesisProblem};
use crate::{Matrix, Vector};

/// Absolute slack on safety margins for empirical checks.
pub const SAFETY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Message {
    /// 0-based message index.
    pub k: usize,
    pub t_k: usize,
    pub value: f64,
}

/// Messages in the order they were sent (sorted by send time).
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MessageLog {
    pub entries: Vec<Message>,
}

impl MessageLog {
    pub fn len(&self) -> usize {
        self.entries.len()
    }
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// What each node read and when.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AccessLog {
    /// `(k, latest measurement time read)` per encoded message.
    pub sensor_reads: Vec<(usize, usize)>,
    /// `(t, k)`: message `k` used while computing `u_t`.
    pub actuator_reads: Vec<(usize, usize)>,
}

/// One noise realization: `x_0`, `w_0..w_{T-1}`, `v_0..v_{T-1}`. The final
/// measurement noise `v_T` is taken as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub x0: Vector,
    pub w: Vec<Vector>,
    pub v: Vec<Vector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `x_0..x_T`.
    pub x: Vec<Vector>,
    /// `u_0..u_T`; `u_T` is computed but never applied.
    pub u: Vec<Vector>,
    /// `y_0..y_T`.
    pub y: Vec<Vector>,
    pub w: Vec<Vector>,
    /// `v_0..v_T`.
    pub v: Vec<Vector>,
    pub messages: MessageLog,
    pub access: AccessLog,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.x.len() - 1
    }

    /// Largest input difference over the applied inputs `u_0..u_{T-1}`.
    pub fn max_input_deviation(&self, other: &Trajectory) -> f64 {
        let n = self.horizon().min(other.horizon());
        (0..n).map(|t| (&self.u[t] - &other.u[t]).amax()).fold(0.0, f64::max)
    }

    /// CSV with columns `t, x1.., u1..`; the unapplied `u_T` is left empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let nx = self.x[0].len();
        let nu = self.u[0].len();
        let mut header = vec!["t".to_string()];
        header.extend((1..=nx).map(|i| format!("x{i}")));
        header.extend((1..=nu).map(|i| format!("u{i}")));
        w.write_record(&header).map_err(csv_err)?;
        let horizon = self.horizon();
        for t in 0..=horizon {
            let mut rec = vec![t.to_string()];
            rec.extend(self.x[t].iter().map(f64::to_string));
            if t < horizon {
                rec.extend(self.u[t].iter().map(f64::to_string));
            } else {
                rec.extend(std::iter::repeat(String::new()).take(nu));
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Internal(e.to_string()))
    }

    /// CSV with columns `k, t_k, m_k` (1-based `k`).
    pub fn write_messages_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "t_k", "m_k"]).map_err(csv_err)?;
        for m in &self.messages.entries {
            w.write_record([(m.k + 1).to_string(), m.t_k.to_string(), m.value.to_string()])
                .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Internal(e.to_string()))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Internal(format!("csv: {e}"))
}

/// Sensor side of the factored controller.
pub struct SensorNode<'a> {
    f: &'a CausalFactorization,
    measurements: Vec<f64>,
    next: usize,
    tx: Sender<Message>,
    sent: Vec<Message>,
    reads: Vec<(usize, usize)>,
}

impl<'a> SensorNode<'a> {
    /// Takes in `y_t` and emits every message scheduled at `t`.
    pub fn observe(&mut self, t: usize, y: &Vector) -> Result<()> {
        let ny = self.f.ny;
        if y.len() != ny || self.measurements.len() != t * ny {
            return Err(Error::dim(format!("sensor expected y_{t} of length {ny}")));
        }
        self.measurements.extend(y.iter());
        let available = self.measurements.len();
        while self.next < self.f.band() && self.f.times[self.next] == t {
            let k = self.next;
            let row = self.f.e.row(k);
            if let Some(c) = (available..row.len()).find(|&c| row[c] != 0.0) {
                return Err(Error::Causality(format!(
                    "message {k} at t={t} needs y_{} which is not measured yet",
                    c / ny
                )));
            }
            let latest = (0..available).rev().find(|&c| row[c] != 0.0).map_or(0, |c| c / ny);
            let value = (0..available).map(|c| row[c] * self.measurements[c]).sum();
            let msg = Message { k, t_k: t, value };
            self.reads.push((k, latest));
            self.sent.push(msg);
            self.tx.send(msg).map_err(|_| Error::Internal("actuator node hung up".into()))?;
            self.next += 1;
        }
        Ok(())
    }
}

/// Actuator side of the factored controller.
pub struct ActuatorNode<'a> {
    f: &'a CausalFactorization,
    rx: Receiver<Message>,
    received: Vec<Option<f64>>,
    reads: Vec<(usize, usize)>,
}

impl<'a> ActuatorNode<'a> {
    /// Computes `u_t` from the messages delivered so far.
    pub fn actuate(&mut self, t: usize) -> Result<Vector> {
        while let Ok(msg) = self.rx.try_recv() {
            self.received[msg.k] = Some(msg.value);
        }
        let nu = self.f.nu;
        let mut u = Vector::zeros(nu);
        for k in 0..self.f.band() {
            let column: Vec<f64> = (0..nu).map(|i| self.f.d[(t * nu + i, k)]).collect();
            if column.iter().all(|&c| c == 0.0) {
                continue;
            }
            let m = self.received[k].ok_or_else(|| {
                Error::Causality(format!("u_{t} depends on message {k}, which has not arrived"))
            })?;
            self.reads.push((t, k));
            for i in 0..nu {
                u[i] += column[i] * m;
            }
        }
        Ok(u)
    }
}

/// Wires a sensor node to an actuator node.
pub fn connect(f: &CausalFactorization) -> Result<(SensorNode<'_>, ActuatorNode<'_>)> {
    if !verify_causality(f) {
        return Err(Error::Causality("factorization violates its message schedule".into()));
    }
    let (tx, rx) = channel();
    Ok((
        SensorNode { f, measurements: Vec::new(), next: 0, tx, sent: Vec::new(), reads: Vec::new() },
        ActuatorNode { f, rx, received: vec![None; f.band()], reads: Vec::new() },
    ))
}

/// Runs the two nodes on a fixed measurement sequence `y_0..y_T`, returning
/// the inputs and the logs.
pub fn run_encoder_decoder(f: &CausalFactorization, ys: &[Vector]) -> Result<(Vec<Vector>, MessageLog, AccessLog)> {
    if ys.len() != f.horizon + 1 {
        return Err(Error::dim(format!("expected {} measurements, got {}", f.horizon + 1, ys.len())));
    }
    let (mut sensor, mut actuator) = connect(f)?;
    let mut us = Vec::with_capacity(ys.len());
    for (t, y) in ys.iter().enumerate() {
        sensor.observe(t, y)?;
        us.push(actuator.actuate(t)?);
    }
    let access = AccessLog { sensor_reads: sensor.reads, actuator_reads: actuator.reads };
    Ok((us, MessageLog { entries: sensor.sent }, access))
}

fn check_draw(problem: &SynthesisProblem, draw: &NoiseDraw) -> Result<()> {
    let sys = &problem.system;
    let t_h = sys.horizon();
    if draw.x0.len() != sys.nx()
        || draw.w.len() != t_h
        || draw.v.len() != t_h
        || draw.w.iter().any(|w| w.len() != sys.nx())
        || draw.v.iter().any(|v| v.len() != sys.ny())
    {
        return Err(Error::dim("noise draw does not match the system dimensions"));
    }
    let s = &problem.safety;
    let outside = !s.x0.contains(&draw.x0, SAFETY_TOL)
        || draw.w.iter().zip(&s.w).any(|(w, set)| !set.contains(w, SAFETY_TOL))
        || draw.v.iter().zip(&s.v).any(|(v, set)| !set.contains(v, SAFETY_TOL));
    if outside {
        log::warn!("noise draw lies outside its admissible sets");
    }
    Ok(())
}

fn rollout(
    problem: &SynthesisProblem,
    draw: &NoiseDraw,
    mut controller: impl FnMut(usize, &Vector) -> Result<Vector>,
) -> Result<Trajectory> {
    check_draw(problem, draw)?;
    let sys = &problem.system;
    let t_h = sys.horizon();
    let mut v = draw.v.clone();
    v.push(Vector::zeros(sys.ny()));
    let mut x = vec![draw.x0.clone()];
    let mut y = Vec::with_capacity(t_h + 1);
    let mut u = Vec::with_capacity(t_h + 1);
    for t in 0..=t_h {
        let yt = sys.c(t) * &x[t] + &v[t];
        let ut = controller(t, &yt)?;
        if ut.len() != sys.nu() {
            return Err(Error::dim("controller returned an input of the wrong size"));
        }
        if t < t_h {
            x.push(sys.a(t) * &x[t] + sys.b(t) * &ut + &draw.w[t]);
        }
        y.push(yt);
        u.push(ut);
    }
    Ok(Trajectory { x, u, y, w: draw.w.clone(), v, messages: MessageLog::default(), access: AccessLog::default() })
}

/// Closed loop under `u_t = sum_{tau <= t} K_(t,tau) y_tau`.
pub fn simulate_monolithic(problem: &SynthesisProblem, k: &BlockLowerTriangular, draw: &NoiseDraw) -> Result<Trajectory> {
    let sys = &problem.system;
    if k.block_rows() != sys.nu() || k.block_cols() != sys.ny() || k.horizon() != sys.horizon() {
        return Err(Error::dim("controller does not match the system"));
    }
    let nu = sys.nu();
    let mut history: Vec<f64> = Vec::new();
    rollout(problem, draw, |t, y| {
        history.extend(y.iter());
        let gain = k.data().view((t * nu, 0), (nu, history.len()));
        Ok(gain * Vector::from_column_slice(&history))
    })
}

/// Closed loop with the sensor and actuator nodes of `f` in the loop.
pub fn simulate_distributed(problem: &SynthesisProblem, f: &CausalFactorization, draw: &NoiseDraw) -> Result<Trajectory> {
    let sys = &problem.system;
    if f.nu != sys.nu() || f.ny != sys.ny() || f.horizon != sys.horizon() {
        return Err(Error::dim("factorization does not match the system"));
    }
    let (mut sensor, mut actuator) = connect(f)?;
    let mut traj = rollout(problem, draw, |t, y| {
        sensor.observe(t, y)?;
        actuator.actuate(t)
    })?;
    traj.messages = MessageLog { entries: sensor.sent };
    traj.access = AccessLog { sensor_reads: sensor.reads, actuator_reads: actuator.reads };
    Ok(traj)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Uniform,
    Vertex,
}

fn as_box(set: &HPolytope, what: &str) -> Result<BoxSet> {
    set.as_box()
        .ok_or_else(|| Error::UnsupportedSet(format!("{what} must be a box for sampling")))
}

fn sample_box(b: &BoxSet, mode: SampleMode, rng: &mut ChaCha8Rng) -> Vector {
    Vector::from_fn(b.dim(), |i, _| {
        let (lo, hi) = (b.lower()[i], b.upper()[i]);
        match mode {
            SampleMode::Uniform => rng.gen_range(lo..=hi),
            SampleMode::Vertex => {
                if rng.gen_bool(0.5) {
                    hi
                } else {
                    lo
                }
            }
        }
    })
}

/// `count` noise draws, reproducible from `seed`.
pub fn sample_noise(problem: &SynthesisProblem, mode: SampleMode, count: usize, seed: u64) -> Result<Vec<NoiseDraw>> {
    let s = &problem.safety;
    let x0 = as_box(&s.x0, "initial set")?;
    let w = s.w.iter().enumerate().map(|(t, p)| as_box(p, &format!("W_{t}"))).collect::<Result<Vec<_>>>()?;
    let v = s.v.iter().enumerate().map(|(t, p)| as_box(p, &format!("V_{t}"))).collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| NoiseDraw {
            x0: sample_box(&x0, mode, &mut rng),
            w: w.iter().map(|b| sample_box(b, mode, &mut rng)).collect(),
            v: v.iter().map(|b| sample_box(b, mode, &mut rng)).collect(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SafetyReport {
    pub pass: bool,
    pub worst_margin: f64,
    /// Smallest margin of `x_t` in `X_t`, `t = 1..T`.
    pub state_margins: Vec<f64>,
    /// Smallest margin of `u_t` in `U_t`, `t = 0..T-1`.
    pub input_margins: Vec<f64>,
}

/// Membership margins of the trajectory in the safe sets.
pub fn check_safety(problem: &SynthesisProblem, traj: &Trajectory) -> SafetyReport {
    let s = &problem.safety;
    let t_h = problem.horizon();
    let state_margins: Vec<f64> = (1..=t_h).map(|t| s.state_set(t).margins(&traj.x[t]).min()).collect();
    let input_margins: Vec<f64> = (0..t_h).map(|t| s.u[t].margins(&traj.u[t]).min()).collect();
    let worst_margin = state_margins.iter().chain(&input_margins).copied().fold(f64::INFINITY, f64::min);
    SafetyReport { pass: worst_margin >= -SAFETY_TOL, worst_margin, state_margins, input_margins }
}

/// `K` from a raw gain matrix, for hand-written controllers.
pub fn controller(data: Matrix, problem: &SynthesisProblem) -> Result<BlockLowerTriangular> {
    let sys = &problem.system;
    BlockLowerTriangular::new(data, sys.nu(), sys.ny(), sys.horizon())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factorization::causal_factorize;
    use crate::problem::{drone_benchmark_problem, Objective, SafetySpec, SolverOptions, TimeVaryingLinearSystem};

    fn example_factorization() -> CausalFactorization {
        #[rustfmt::skip]
        let k = Matrix::from_row_slice(4, 4, &[
            5.0,  0.0, 0.0, 0.0,
            10.0, 0.0, 0.0, 0.0,
            0.0,  3.0, 4.0, 0.0,
            15.0, 6.0, 8.0, 0.0,
        ]);
        causal_factorize(&BlockLowerTriangular::new(k, 1, 1, 3).unwrap(), 1e-9).unwrap()
    }

    fn scalar_problem(horizon: usize, a: f64, radius: f64) -> SynthesisProblem {
        let sys = TimeVaryingLinearSystem::time_invariant(
            horizon,
            Matrix::from_element(1, 1, a),
            Matrix::from_element(1, 1, 1.0),
            Matrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let b = |r: f64| BoxSet::symmetric(1, r).unwrap().to_hpolytope();
        let safety = SafetySpec {
            x0: b(1.0),
            x: vec![b(radius); horizon],
            u: vec![b(radius); horizon],
            w: vec![b(0.1); horizon],
            v: vec![b(0.1); horizon],
        };
        SynthesisProblem::new(sys, safety, Objective::Rank, SolverOptions::default()).unwrap()
    }

    fn scalar(v: f64) -> Vector {
        Vector::from_element(1, v)
    }

    #[test]
    fn example_messages() {
        let f = example_factorization();
        let ys: Vec<Vector> = [1.0, 2.0, 3.0, 4.0].into_iter().map(scalar).collect();
        let (us, log, access) = run_encoder_decoder(&f, &ys).unwrap();
        assert_eq!(log.entries.len(), 2);
        assert_eq!((log.entries[0].t_k, log.entries[0].value), (0, 5.0));
        assert_eq!((log.entries[1].t_k, log.entries[1].value), (2, 3.0 * 2.0 + 4.0 * 3.0));
        assert_eq!(us[3][0], 3.0 * 5.0 + 2.0 * 18.0);
        assert_eq!(us[0][0], 5.0);
        assert_eq!(us[1][0], 10.0);
        assert_eq!(us[2][0], 18.0);
        assert!(access.sensor_reads.iter().all(|&(k, tau)| tau <= f.times[k]));
        assert!(access.actuator_reads.iter().all(|&(t, k)| f.times[k] <= t));
    }

    #[test]
    fn band_zero_sends_nothing() {
        let f = causal_factorize(&BlockLowerTriangular::zeros(1, 1, 3), 1e-9).unwrap();
        let ys: Vec<Vector> = (0..4).map(|t| scalar(t as f64)).collect();
        let (us, log, _) = run_encoder_decoder(&f, &ys).unwrap();
        assert!(log.is_empty());
        assert!(us.iter().all(|u| u[0] == 0.0));
    }

    #[test]
    fn hand_crafted_lookahead_rejected() {
        let mut f = example_factorization();
        f.times[1] = 1;
        let ys: Vec<Vector> = (0..4).map(|t| scalar(t as f64)).collect();
        assert!(matches!(run_encoder_decoder(&f, &ys), Err(Error::Causality(_))));
    }

    #[test]
    fn zero_everything_is_zero() {
        let p = scalar_problem(3, 1.0, 1.0);
        let draw = NoiseDraw { x0: scalar(0.0), w: vec![scalar(0.0); 3], v: vec![scalar(0.0); 3] };
        let traj = simulate_monolithic(&p, &BlockLowerTriangular::zeros(1, 1, 3), &draw).unwrap();
        assert!(traj.x.iter().chain(&traj.u).all(|v| v[0] == 0.0));
        let report = check_safety(&p, &traj);
        assert!(report.pass);
        assert_eq!(report.worst_margin, 1.0);
    }

    #[test]
    fn two_step_hand_rollout() {
        // x+ = 2x + u + w, y = x + v, u_0 = -y_0, u_1 = -0.5 y_0 - y_1
        let p = scalar_problem(2, 2.0, 10.0);
        let k = controller(Matrix::from_row_slice(3, 3, &[-1.0, 0.0, 0.0, -0.5, -1.0, 0.0, 0.0, 0.0, 0.0]), &p).unwrap();
        let draw = NoiseDraw { x0: scalar(1.0), w: vec![scalar(0.1), scalar(-0.1)], v: vec![scalar(0.05), scalar(0.0)] };
        let traj = simulate_monolithic(&p, &k, &draw).unwrap();
        let y0 = 1.05;
        let u0 = -y0;
        let x1 = 2.0 + u0 + 0.1;
        let y1 = x1;
        let u1 = -0.5 * y0 - y1;
        let x2 = 2.0 * x1 + u1 - 0.1;
        assert!((traj.u[0][0] - u0).abs() < 1e-15);
        assert!((traj.x[1][0] - x1).abs() < 1e-15);
        assert!((traj.u[1][0] - u1).abs() < 1e-15);
        assert!((traj.x[2][0] - x2).abs() < 1e-15);
    }

    #[test]
    fn distributed_matches_monolithic() {
        let p = scalar_problem(3, 1.0, 10.0);
        let f = example_factorization();
        let k = f.controller().unwrap();
        for draw in sample_noise(&p, SampleMode::Uniform, 5, 3).unwrap() {
            let a = simulate_monolithic(&p, &k, &draw).unwrap();
            let b = simulate_distributed(&p, &f, &draw).unwrap();
            assert!(a.max_input_deviation(&b) < 1e-12);
            assert_eq!(b.messages.len(), f.band());
        }
    }

    #[test]
    fn sampling_modes() {
        let p = drone_benchmark_problem();
        let vertex = sample_noise(&p, SampleMode::Vertex, 10, 1).unwrap();
        for d in &vertex {
            assert!(d.w.iter().all(|w| w.iter().all(|c| (c.abs() - 0.05).abs() < 1e-15)));
            // velocity part of the initial set is the degenerate interval {0}
            assert_eq!(d.x0[2], 0.0);
            assert_eq!(d.x0[3], 0.0);
        }
        let uniform = sample_noise(&p, SampleMode::Uniform, 40, 1).unwrap();
        assert_eq!(uniform.len(), 40);
        for d in &uniform {
            assert!(p.safety.x0.contains(&d.x0, 0.0));
            assert_eq!(d.x0[2], 0.0);
            assert!(d.v.iter().all(|v| v.amax() <= 0.05));
        }
        assert_eq!(sample_noise(&p, SampleMode::Uniform, 3, 7).unwrap(), sample_noise(&p, SampleMode::Uniform, 3, 7).unwrap());
    }

    #[test]
    fn non_box_noise_rejected() {
        let mut p = scalar_problem(2, 1.0, 1.0);
        p.safety.w[0] = HPolytope::new(Matrix::from_row_slice(3, 1, &[1.0, -1.0, 2.0]), Vector::from_vec(vec![1.0, 1.0, 1.0])).unwrap();
        assert!(matches!(sample_noise(&p, SampleMode::Uniform, 1, 0), Err(Error::UnsupportedSet(_))));
    }

    #[test]
    fn open_loop_misses_waypoint() {
        let p = drone_benchmark_problem();
        let k = BlockLowerTriangular::zeros(2, 2, 20);
        let draw = &sample_noise(&p, SampleMode::Uniform, 1, 0).unwrap()[0];
        let traj = simulate_monolithic(&p, &k, draw).unwrap();
        let report = check_safety(&p, &traj);
        assert!(!report.pass);
        assert!(report.state_margins[9] < 0.0);
    }

    #[test]
    fn csv_layout() {
        let p = scalar_problem(2, 1.0, 1.0);
        let f = causal_factorize(&BlockLowerTriangular::new(Matrix::identity(3, 3), 1, 1, 2).unwrap(), 1e-9).unwrap();
        let draw = NoiseDraw { x0: scalar(0.5), w: vec![scalar(0.0); 2], v: vec![scalar(0.0); 2] };
        let traj = simulate_distributed(&p, &f, &draw).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,x1,u1");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].ends_with(','));
        let mut buf = Vec::new();
        traj.write_messages_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("k,t_k,m_k"));
        assert_eq!(text.lines().count(), 4);
    }
}
