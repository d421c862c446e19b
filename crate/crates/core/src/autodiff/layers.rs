use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Weight matrix drawn uniformly from `±1/√fan_in`.
pub fn uniform_init(rng: &mut Rng, rows: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * fan_in)
        .map(|_| rng.uniform_range(-bound, bound))
        .collect();
    Tensor::matrix(rows, fan_in, data).expect("sized")
}

/// Fully-connected layer `y = x · Wᵀ + b`.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    /// Registers `{prefix}.weight` (`out x in`) and `{prefix}.bias` (`out`).
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weight = store.insert(
            &format!("{prefix}.weight"),
            uniform_init(rng, out_dim, in_dim),
            true,
        )?;
        let bias = store.insert(&format!("{prefix}.bias"), Tensor::zeros(&[out_dim]), true)?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// Looks up an already-registered layer.
    pub fn bind(store: &ParamStore, prefix: &str) -> Result<Self> {
        let weight = lookup(store, &format!("{prefix}.weight"))?;
        let bias = lookup(store, &format!("{prefix}.bias"))?;
        let (out_dim, in_dim) = store.get(weight).dims2();
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        linear_forward(self, g, store, x)
    }
}

pub(crate) fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
}

/// Applies a fully-connected layer to every row of `x`.
pub fn linear_forward(layer: &LinearLayer, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
    let cols = g.value(x).cols();
    if cols != layer.in_dim {
        return Err(Error::Shape(format!(
            "linear layer expects {} inputs, got {cols}",
            layer.in_dim
        )));
    }
    let w = g.param(store, layer.weight);
    let b = g.param(store, layer.bias);
    g.linear(x, w, Some(b))
}

/// One GRU direction.
///
/// ```text
/// z = σ(W_z x + U_z h + b_z)
/// r = σ(W_r x + U_r h + b_r)
/// n = tanh(W_n x + U_n (r ⊙ h) + b_n)
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    input: [LinearLayer; 3],
    hidden: [ParamId; 3],
    pub hidden_dim: usize,
}

const GATES: [&str; 3] = ["update", "reset", "candidate"];

impl GruCell {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        hidden_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut input = Vec::with_capacity(3);
        let mut hidden = [ParamId(0); 3];
        for (k, gate) in GATES.iter().enumerate() {
            input.push(LinearLayer::new(
                store,
                &format!("{prefix}.{gate}.input"),
                in_dim,
                hidden_dim,
                rng,
            )?);
            hidden[k] = store.insert(
                &format!("{prefix}.{gate}.hidden"),
                uniform_init(rng, hidden_dim, hidden_dim),
                true,
            )?;
        }
        Ok(Self {
            input: input.try_into().expect("three gates"),
            hidden,
            hidden_dim,
        })
    }

    pub fn bind(store: &ParamStore, prefix: &str) -> Result<Self> {
        let mut input = Vec::with_capacity(3);
        let mut hidden = [ParamId(0); 3];
        for (k, gate) in GATES.iter().enumerate() {
            input.push(LinearLayer::bind(store, &format!("{prefix}.{gate}.input"))?);
            hidden[k] = lookup(store, &format!("{prefix}.{gate}.hidden"))?;
        }
        let hidden_dim = input[0].out_dim;
        Ok(Self {
            input: input.try_into().expect("three gates"),
            hidden,
            hidden_dim,
        })
    }

    /// Runs over the rows of `xs` in the given order of row indices and
    /// returns one `1 x hidden` state per visited row, in visiting order.
    pub(crate) fn run(&self, g: &mut Graph, store: &ParamStore, xs: Var, order: &[usize]) -> Result<Vec<Var>> {
        // Input projections for all steps at once.
        let mut proj = [xs; 3];
        for (k, layer) in self.input.iter().enumerate() {
            proj[k] = layer.forward(g, store, xs)?;
        }
        let u: Vec<Var> = self.hidden.iter().map(|&id| g.param(store, id)).collect();
        let mut h = g.constant(Tensor::zeros(&[1, self.hidden_dim]));
        let mut states = Vec::with_capacity(order.len());
        for &t in order {
            let xz = g.slice_row(proj[0], t)?;
            let xr = g.slice_row(proj[1], t)?;
            let xn = g.slice_row(proj[2], t)?;
            let hz = g.linear(h, u[0], None)?;
            let hr = g.linear(h, u[1], None)?;
            let z = g.add(xz, hz)?;
            let z = g.sigmoid(z);
            let r = g.add(xr, hr)?;
            let r = g.sigmoid(r);
            let rh = g.mul(r, h)?;
            let hn = g.linear(rh, u[2], None)?;
            let n = g.add(xn, hn)?;
            let n = g.tanh(n);
            // h' = n + z ⊙ (h - n)
            let d = g.sub(h, n)?;
            let zd = g.mul(z, d)?;
            h = g.add(n, zd)?;
            states.push(h);
        }
        Ok(states)
    }
}

/// Bidirectional GRU: row `t` of the output is `[forward_t, backward_t]`.
#[derive(Clone, Debug)]
pub struct BiGruLayer {
    pub forward: GruCell,
    pub backward: GruCell,
    pub hidden_dim: usize,
}

impl BiGruLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        hidden_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            forward: GruCell::new(store, &format!("{prefix}.fwd"), in_dim, hidden_dim, rng)?,
            backward: GruCell::new(store, &format!("{prefix}.bwd"), in_dim, hidden_dim, rng)?,
            hidden_dim,
        })
    }

    pub fn bind(store: &ParamStore, prefix: &str) -> Result<Self> {
        let forward = GruCell::bind(store, &format!("{prefix}.fwd"))?;
        let backward = GruCell::bind(store, &format!("{prefix}.bwd"))?;
        let hidden_dim = forward.hidden_dim;
        Ok(Self {
            forward,
            backward,
            hidden_dim,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.forward.input[0].in_dim
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, xs: Var) -> Result<Var> {
        bigru_forward(self, g, store, xs)
    }
}

/// Runs both directions over the rows of `xs` (`T x in`) and returns the
/// `T x 2·hidden` matrix of concatenated states.
pub fn bigru_forward(layer: &BiGruLayer, g: &mut Graph, store: &ParamStore, xs: Var) -> Result<Var> {
    let (steps, cols) = g.value(xs).dims2();
    if steps == 0 || g.value(xs).is_empty() {
        return Err(Error::Contract("bidirectional GRU over an empty sequence".into()));
    }
    if cols != layer.in_dim() {
        return Err(Error::Shape(format!(
            "GRU expects {} features, got {cols}",
            layer.in_dim()
        )));
    }
    let fwd_order: Vec<usize> = (0..steps).collect();
    let bwd_order: Vec<usize> = (0..steps).rev().collect();
    let fwd = layer.forward.run(g, store, xs, &fwd_order)?;
    let mut bwd = layer.backward.run(g, store, xs, &bwd_order)?;
    bwd.reverse();
    let f = g.stack_rows(&fwd)?;
    let b = g.stack_rows(&bwd)?;
    g.concat_cols(&[f, b])
}
