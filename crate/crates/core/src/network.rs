//! Three parallel single-hidden-layer networks estimating the inertia,
//! Coriolis and gravity terms, and their weight Jacobians.
//!
//! Weight layout: the hidden matrix is `P × (d_in + 1)` and the output matrix
//! is `d_out × (P + 1)`, each with the bias in the last column. Flattening is
//! row-major, so every row's bias comes last. The learner relies on this
//! order when it reshapes gradients.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt_f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    /// Linear hidden layer; the Taylor-linearized Jacobians are then exact.
    Identity,
}

impl Activation {
    pub fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => a.tanh(),
            Activation::Identity => a,
        }
    }

    pub fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = a.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn second_derivative(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = a.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Activation::Identity => 0.0,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubnetWeights {
    /// `P × (d_in + 1)`, last column = hidden bias.
    pub hidden: DMatrix<f64>,
    /// `d_out × (P + 1)`, last column = output bias.
    pub output: DMatrix<f64>,
}

/// Jacobian of a subnet's output vector with respect to its flattened
/// output-layer and hidden-layer weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightJacobian {
    /// `rows × (d_out·(P+1))`.
    pub output: DMatrix<f64>,
    /// `rows × (P·(d_in+1))`.
    pub hidden: DMatrix<f64>,
}

impl WeightJacobian {
    /// Left-multiplies both blocks by `a` (chain rule through a linear map of
    /// the subnet output).
    pub fn map(&self, a: &DMatrix<f64>) -> WeightJacobian {
        WeightJacobian {
            output: a * &self.output,
            hidden: a * &self.hidden,
        }
    }
}

impl SubnetWeights {
    pub fn zeros(d_in: usize, hidden: usize, d_out: usize) -> Self {
        Self {
            hidden: DMatrix::zeros(hidden, d_in + 1),
            output: DMatrix::zeros(d_out, hidden + 1),
        }
    }

    /// Uniform `[-scale/√fan_in, scale/√fan_in]` per layer.
    pub fn random<R: Rng>(d_in: usize, hidden: usize, d_out: usize, scale: f64, rng: &mut R) -> Self {
        let bh = scale / (d_in as f64).sqrt();
        let bo = scale / (hidden.max(1) as f64).sqrt();
        let mut w = Self::zeros(d_in, hidden, d_out);
        // Fill row-major so the draw order matches the flattening order.
        for r in 0..w.hidden.nrows() {
            for c in 0..w.hidden.ncols() {
                w.hidden[(r, c)] = rng.random_range(-bh..=bh);
            }
        }
        for r in 0..w.output.nrows() {
            for c in 0..w.output.ncols() {
                w.output[(r, c)] = rng.random_range(-bo..=bo);
            }
        }
        w
    }

    pub fn d_in(&self) -> usize {
        self.hidden.ncols() - 1
    }

    pub fn d_out(&self) -> usize {
        self.output.nrows()
    }

    pub fn hidden_units(&self) -> usize {
        self.hidden.nrows()
    }

    pub fn n_output_params(&self) -> usize {
        self.output.len()
    }

    pub fn n_hidden_params(&self) -> usize {
        self.hidden.len()
    }

    pub fn is_consistent(&self) -> bool {
        self.output.ncols() == self.hidden.nrows() + 1
            && self.hidden.iter().chain(self.output.iter()).all(|x| x.is_finite())
    }

    fn check_input(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.d_in() {
            return Err(Error::Shape(format!(
                "subnet expects {} inputs, got {}",
                self.d_in(),
                x.len()
            )));
        }
        Ok(())
    }

    /// Hidden pre-activations `a = W_h [x; 1]`.
    fn pre_activation(&self, x: &DVector<f64>) -> DVector<f64> {
        let d = self.d_in();
        let mut a = self.hidden.column(d).into_owned();
        a.gemv(1.0, &self.hidden.columns(0, d), x, 1.0);
        a
    }

    /// `[F(a); 1]`.
    fn hidden_augmented(&self, a: &DVector<f64>, act: Activation) -> DVector<f64> {
        let p = a.len();
        DVector::from_fn(p + 1, |j, _| if j < p { act.apply(a[j]) } else { 1.0 })
    }

    /// `ŷ_n = Σ_j W_o[n,j] F(Σ_i W_h[j,i] x_i + W_h[j,bias]) + W_o[n,bias]`.
    pub fn forward(&self, x: &DVector<f64>, act: Activation) -> Result<DVector<f64>> {
        self.check_input(x)?;
        let a = self.pre_activation(x);
        Ok(&self.output * self.hidden_augmented(&a, act))
    }

    /// Exact Jacobian of the output vector with respect to the weights.
    pub fn output_jacobian(&self, x: &DVector<f64>, act: Activation) -> Result<WeightJacobian> {
        self.check_input(x)?;
        let (d, p, o) = (self.d_in(), self.hidden_units(), self.d_out());
        let a = self.pre_activation(x);
        let h = self.hidden_augmented(&a, act);

        let mut jo = DMatrix::zeros(o, o * (p + 1));
        for r in 0..o {
            for j in 0..=p {
                jo[(r, r * (p + 1) + j)] = h[j];
            }
        }
        let mut jh = DMatrix::zeros(o, p * (d + 1));
        for j in 0..p {
            let fp = act.derivative(a[j]);
            for i in 0..=d {
                let xi = if i < d { x[i] } else { 1.0 };
                let col = j * (d + 1) + i;
                for r in 0..o {
                    jh[(r, col)] = self.output[(r, j)] * fp * xi;
                }
            }
        }
        Ok(WeightJacobian { output: jo, hidden: jh })
    }

    /// Time derivative of the output along `ẋ`: `ẏ = W_o[:, :P] (F'(a) ⊙ W_h[:, :d] ẋ)`.
    pub fn output_rate(&self, x: &DVector<f64>, xdot: &DVector<f64>, act: Activation) -> Result<DVector<f64>> {
        self.check_input(x)?;
        self.check_input(xdot)?;
        let (d, p) = (self.d_in(), self.hidden_units());
        let a = self.pre_activation(x);
        let s = self.hidden.columns(0, d) * xdot;
        let u = DVector::from_fn(p, |j, _| act.derivative(a[j]) * s[j]);
        Ok(self.output.columns(0, p) * u)
    }

    /// Jacobian of [`Self::output_rate`] with respect to the weights.
    pub fn output_rate_jacobian(
        &self,
        x: &DVector<f64>,
        xdot: &DVector<f64>,
        act: Activation,
    ) -> Result<WeightJacobian> {
        self.check_input(x)?;
        self.check_input(xdot)?;
        let (d, p, o) = (self.d_in(), self.hidden_units(), self.d_out());
        let a = self.pre_activation(x);
        let s = self.hidden.columns(0, d) * xdot;

        let mut jo = DMatrix::zeros(o, o * (p + 1));
        for j in 0..p {
            let u = act.derivative(a[j]) * s[j];
            for r in 0..o {
                jo[(r, r * (p + 1) + j)] = u;
            }
        }
        let mut jh = DMatrix::zeros(o, p * (d + 1));
        for j in 0..p {
            let fp = act.derivative(a[j]);
            let fpp = act.second_derivative(a[j]);
            for i in 0..=d {
                let (xi, xdi) = if i < d { (x[i], xdot[i]) } else { (1.0, 0.0) };
                let du = fpp * xi * s[j] + fp * xdi;
                let col = j * (d + 1) + i;
                for r in 0..o {
                    jh[(r, col)] = self.output[(r, j)] * du;
                }
            }
        }
        Ok(WeightJacobian { output: jo, hidden: jh })
    }

    /// Row-major flattening: output block then hidden block.
    pub fn flatten(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.output.len() + self.hidden.len());
        v.extend(row_major(&self.output));
        v.extend(row_major(&self.hidden));
        DVector::from_vec(v)
    }

    pub fn unflatten(&mut self, v: &[f64]) -> Result<()> {
        let (no, nh) = (self.n_output_params(), self.n_hidden_params());
        if v.len() != no + nh {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                no + nh,
                v.len()
            )));
        }
        fill_row_major(&mut self.output, &v[..no]);
        fill_row_major(&mut self.hidden, &v[no..]);
        Ok(())
    }
}

pub(crate) fn row_major(m: &DMatrix<f64>) -> impl Iterator<Item = f64> + '_ {
    (0..m.nrows()).flat_map(move |r| (0..m.ncols()).map(move |c| m[(r, c)]))
}

pub(crate) fn fill_row_major(m: &mut DMatrix<f64>, v: &[f64]) {
    let cols = m.ncols();
    for (k, &x) in v.iter().enumerate() {
        m[(k / cols, k % cols)] = x;
    }
}

/// Reshapes a length-`N²` vector into an `N × N` matrix, row-major.
pub fn reshape_square(v: &DVector<f64>, n: usize) -> DMatrix<f64> {
    debug_assert_eq!(v.len(), n * n);
    DMatrix::from_row_slice(n, n, v.as_slice())
}

/// Row-major `vec(A)`.
pub fn flatten_square(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.len(), row_major(m))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TermsEstimate {
    pub mass: DMatrix<f64>,
    pub coriolis: DMatrix<f64>,
    pub gravity: DVector<f64>,
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
}

impl TermsEstimate {
    pub fn dof(&self) -> usize {
        self.gravity.len()
    }

    pub fn torque(&self, qddot: &DVector<f64>) -> DVector<f64> {
        &self.mass * qddot + &self.coriolis * &self.qdot + &self.gravity
    }
}

/// Which of the three subnetworks a quantity belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Term {
    Inertia,
    Coriolis,
    Gravity,
}

impl Term {
    pub const ALL: [Term; 3] = [Term::Inertia, Term::Coriolis, Term::Gravity];

    pub fn label(self) -> &'static str {
        match self {
            Term::Inertia => "M",
            Term::Coriolis => "C",
            Term::Gravity => "G",
        }
    }
}

/// `ζ_i = ∂τ̂/∂W_i^o` and `ξ_i = ∂τ̂/∂W_i^h` (first-order Taylor term) for
/// each subnet.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorJacobians {
    pub inertia: WeightJacobian,
    pub coriolis: WeightJacobian,
    pub gravity: WeightJacobian,
}

impl RegressorJacobians {
    pub fn get(&self, term: Term) -> &WeightJacobian {
        match term {
            Term::Inertia => &self.inertia,
            Term::Coriolis => &self.coriolis,
            Term::Gravity => &self.gravity,
        }
    }
}

/// Weight initialization settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitSpec {
    pub seed: u64,
    /// Layer weights are uniform in `[-scale/√fan_in, scale/√fan_in]`.
    pub scale: f64,
    /// Configuration at which `M̂` is pinned to `inertia_diagonal · I`.
    pub inertia_diagonal: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            scale: 0.1,
            inertia_diagonal: 0.1,
        }
    }
}

/// Hidden layer widths of the three subnets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HiddenSizes {
    pub inertia: usize,
    pub coriolis: usize,
    pub gravity: usize,
}

impl Default for HiddenSizes {
    fn default() -> Self {
        Self {
            inertia: 8,
            coriolis: 8,
            gravity: 8,
        }
    }
}

/// The parameter set θ: inertia, Coriolis and gravity subnets.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkBundle {
    pub inertia: SubnetWeights,
    pub coriolis: SubnetWeights,
    pub gravity: SubnetWeights,
    pub activation: Activation,
}

impl NetworkBundle {
    pub fn zeros(dof: usize, sizes: HiddenSizes, activation: Activation) -> Self {
        Self {
            inertia: SubnetWeights::zeros(dof, sizes.inertia, dof * dof),
            coriolis: SubnetWeights::zeros(2 * dof, sizes.coriolis, dof * dof),
            gravity: SubnetWeights::zeros(dof, sizes.gravity, dof),
            activation,
        }
    }

    /// Seeded random weights; the inertia subnet's output bias is shifted so
    /// that `M̂(q0) = init.inertia_diagonal · I`.
    pub fn initialize(
        dof: usize,
        sizes: HiddenSizes,
        activation: Activation,
        init: &InitSpec,
        q0: &DVector<f64>,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
        let mut nets = Self {
            inertia: SubnetWeights::random(dof, sizes.inertia, dof * dof, init.scale, &mut rng),
            coriolis: SubnetWeights::random(2 * dof, sizes.coriolis, dof * dof, init.scale, &mut rng),
            gravity: SubnetWeights::random(dof, sizes.gravity, dof, init.scale, &mut rng),
            activation,
        };
        let m0 = nets.inertia.forward(q0, activation)?;
        let p = sizes.inertia;
        for r in 0..dof * dof {
            let target = if r / dof == r % dof { init.inertia_diagonal } else { 0.0 };
            nets.inertia.output[(r, p)] += target - m0[r];
        }
        Ok(nets)
    }

    pub fn dof(&self) -> usize {
        self.gravity.d_out()
    }

    pub fn subnet(&self, term: Term) -> &SubnetWeights {
        match term {
            Term::Inertia => &self.inertia,
            Term::Coriolis => &self.coriolis,
            Term::Gravity => &self.gravity,
        }
    }

    pub fn subnet_mut(&mut self, term: Term) -> &mut SubnetWeights {
        match term {
            Term::Inertia => &mut self.inertia,
            Term::Coriolis => &mut self.coriolis,
            Term::Gravity => &mut self.gravity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dof();
        let ok = self.inertia.d_in() == n
            && self.inertia.d_out() == n * n
            && self.coriolis.d_in() == 2 * n
            && self.coriolis.d_out() == n * n
            && self.gravity.d_in() == n
            && Term::ALL.iter().all(|&t| self.subnet(t).is_consistent());
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("network bundle is not dimension-consistent".into()))
        }
    }

    fn check_state(&self, v: &DVector<f64>, what: &str) -> Result<()> {
        if v.len() != self.dof() {
            return Err(Error::Shape(format!(
                "{what} has length {}, networks expect {}",
                v.len(),
                self.dof()
            )));
        }
        Ok(())
    }

    /// `M̂(q)`, `Ĉ(q, q̇)` and `Ĝ(q)`.
    pub fn assemble_terms(&self, q: &DVector<f64>, qdot: &DVector<f64>) -> Result<TermsEstimate> {
        self.check_state(q, "q")?;
        self.check_state(qdot, "qdot")?;
        let n = self.dof();
        let act = self.activation;
        Ok(TermsEstimate {
            mass: reshape_square(&self.inertia.forward(q, act)?, n),
            coriolis: reshape_square(&self.coriolis.forward(&stack(q, qdot), act)?, n),
            gravity: self.gravity.forward(q, act)?,
            q: q.clone(),
            qdot: qdot.clone(),
        })
    }

    /// `τ̂ = M̂q̈ + Ĉq̇ + Ĝ`.
    pub fn predicted_torque(
        &self,
        q: &DVector<f64>,
        qdot: &DVector<f64>,
        qddot: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.check_state(qddot, "qddot")?;
        Ok(self.assemble_terms(q, qdot)?.torque(qddot))
    }

    /// Jacobians of `τ̂` with respect to each subnet's weights.
    pub fn regressor_jacobians(
        &self,
        q: &DVector<f64>,
        qdot: &DVector<f64>,
        qddot: &DVector<f64>,
    ) -> Result<RegressorJacobians> {
        self.check_state(q, "q")?;
        self.check_state(qdot, "qdot")?;
        self.check_state(qddot, "qddot")?;
        let act = self.activation;
        let n = self.dof();
        Ok(RegressorJacobians {
            inertia: self
                .inertia
                .output_jacobian(q, act)?
                .map(&matrix_product_selector(qddot)),
            coriolis: self
                .coriolis
                .output_jacobian(&stack(q, qdot), act)?
                .map(&matrix_product_selector(qdot)),
            gravity: self.gravity.output_jacobian(q, act)?.map(&DMatrix::identity(n, n)),
        })
    }

    /// `dM̂/dt = Σ_k ∂M̂/∂q_k · q̇_k`.
    pub fn mhat_rate(&self, q: &DVector<f64>, qdot: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_state(q, "q")?;
        self.check_state(qdot, "qdot")?;
        let rate = self.inertia.output_rate(q, qdot, self.activation)?;
        Ok(reshape_square(&rate, self.dof()))
    }

    /// Jacobian of row-major `vec(dM̂/dt)` with respect to the inertia subnet.
    pub fn mhat_rate_jacobian(&self, q: &DVector<f64>, qdot: &DVector<f64>) -> Result<WeightJacobian> {
        self.inertia.output_rate_jacobian(q, qdot, self.activation)
    }

    /// Jacobian of row-major `vec(M̂)` with respect to the inertia subnet.
    pub fn mhat_jacobian(&self, q: &DVector<f64>) -> Result<WeightJacobian> {
        self.inertia.output_jacobian(q, self.activation)
    }

    /// Jacobian of row-major `vec(Ĉ)` with respect to the Coriolis subnet.
    pub fn chat_jacobian(&self, q: &DVector<f64>, qdot: &DVector<f64>) -> Result<WeightJacobian> {
        self.coriolis.output_jacobian(&stack(q, qdot), self.activation)
    }

    pub fn n_params(&self) -> usize {
        Term::ALL
            .iter()
            .map(|&t| self.subnet(t).n_output_params() + self.subnet(t).n_hidden_params())
            .sum()
    }

    /// θ flattened as `[W_M^o, W_M^h, W_C^o, W_C^h, W_G^o, W_G^h]`.
    pub fn flatten(&self) -> DVector<f64> {
        let parts: Vec<f64> = Term::ALL
            .iter()
            .flat_map(|&t| self.subnet(t).flatten().data.as_vec().clone())
            .collect();
        DVector::from_vec(parts)
    }

    pub fn unflatten(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                theta.len()
            )));
        }
        let mut offset = 0;
        for t in Term::ALL {
            let w = self.subnet_mut(t);
            let len = w.n_output_params() + w.n_hidden_params();
            w.unflatten(&theta[offset..offset + len])?;
            offset += len;
        }
        Ok(())
    }

    /// Frobenius norms `(‖W^h‖, ‖W^o‖)` per subnet in `Term::ALL` order.
    pub fn block_norms(&self) -> [(f64, f64); 3] {
        Term::ALL.map(|t| {
            let w = self.subnet(t);
            (w.hidden.norm(), w.output.norm())
        })
    }

    /// Serializes the weights in the text snapshot format.
    ///
    /// ```text
    /// nnident-weights,1
    /// activation,tanh
    /// dof,2
    /// block,M_hidden,8,3
    /// <8 rows of 3 comma-separated values>
    /// block,M_output,4,9
    /// ...
    /// ```
    /// Blocks appear in the order M, C, G with hidden before output; values
    /// are written with 17 significant digits, so the snapshot round-trips
    /// exactly.
    pub fn to_snapshot(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "nnident-weights,1");
        let _ = writeln!(s, "activation,{}", self.activation.name());
        let _ = writeln!(s, "dof,{}", self.dof());
        for t in Term::ALL {
            let w = self.subnet(t);
            for (kind, m) in [("hidden", &w.hidden), ("output", &w.output)] {
                let _ = writeln!(s, "block,{}_{},{},{}", t.label(), kind, m.nrows(), m.ncols());
                for r in 0..m.nrows() {
                    let row: Vec<String> = (0..m.ncols()).map(|c| fmt_f64(m[(r, c)])).collect();
                    let _ = writeln!(s, "{}", row.join(","));
                }
            }
        }
        s
    }

    pub fn from_snapshot(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Format(format!("weight snapshot: {msg}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some("nnident-weights,1") {
            return Err(bad("missing header"));
        }
        let activation = match lines.next().and_then(|l| l.trim().strip_prefix("activation,")) {
            Some("tanh") => Activation::Tanh,
            Some("identity") => Activation::Identity,
            _ => return Err(bad("missing or unknown activation")),
        };
        let dof: usize = lines
            .next()
            .and_then(|l| l.trim().strip_prefix("dof,"))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing dof"))?;

        let mut blocks = Vec::with_capacity(6);
        for t in Term::ALL {
            for kind in ["hidden", "output"] {
                let header = lines.next().ok_or_else(|| bad("truncated"))?;
                let fields: Vec<&str> = header.trim().split(',').collect();
                let expect = format!("{}_{}", t.label(), kind);
                if fields.len() != 4 || fields[0] != "block" || fields[1] != expect {
                    return Err(bad(&format!("expected block {expect}")));
                }
                let rows: usize = fields[2].parse().map_err(|_| bad("bad row count"))?;
                let cols: usize = fields[3].parse().map_err(|_| bad("bad column count"))?;
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    let line = lines.next().ok_or_else(|| bad("truncated block"))?;
                    let vals: Vec<f64> = line
                        .trim()
                        .split(',')
                        .map(|v| v.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad("unparsable value"))?;
                    if vals.len() != cols {
                        return Err(bad("row length does not match header"));
                    }
                    data.extend(vals);
                }
                blocks.push(DMatrix::from_row_slice(rows, cols, &data));
            }
        }
        let mut it = blocks.into_iter();
        let mut next = || -> SubnetWeights {
            let hidden = it.next().unwrap_or_default();
            let output = it.next().unwrap_or_default();
            SubnetWeights { hidden, output }
        };
        let nets = Self {
            inertia: next(),
            coriolis: next(),
            gravity: next(),
            activation,
        };
        if nets.dof() != dof {
            return Err(bad("dof does not match block shapes"));
        }
        nets.validate()?;
        Ok(nets)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_snapshot())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_snapshot(&std::fs::read_to_string(path)?)
    }
}

/// `[a; b]`.
pub fn stack(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

/// `∂(A v)/∂vec(A)` for row-major `vec`: an `N × N²` matrix.
pub fn matrix_product_selector(v: &DVector<f64>) -> DMatrix<f64> {
    let n = v.len();
    let mut s = DMatrix::zeros(n, n * n);
    for r in 0..n {
        for k in 0..n {
            s[(r, r * n + k)] = v[k];
        }
    }
    s
}
