use super::graph::{ConvSpec, Graph, Var};
use super::params::{Init, ParamId, ParamStore};

/// Affine map on rows: `x W + b` with `W: in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Self::with_init(store, name, in_dim, out_dim, bias, Init::HeUniform { fan_in: in_dim })
    }

    pub fn with_init(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool, init: Init) -> Self {
        let weight = store.add(format!("{name}.weight"), [in_dim, out_dim], init);
        let bias = bias.then(|| store.add(format!("{name}.bias"), [out_dim], Init::Zeros));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Convolution layer over `(C, H, W)` or `(C, T, H, W)` inputs.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv {
    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize, out_channels: usize, spec: ConvSpec) -> Self {
        let fan_in = in_channels * spec.kernel.iter().product::<usize>();
        Self::with_init(store, name, in_channels, out_channels, spec, Init::HeUniform { fan_in })
    }

    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        spec: ConvSpec,
        init: Init,
    ) -> Self {
        let [kt, kh, kw] = spec.kernel;
        let weight = store.add(format!("{name}.weight"), [out_channels, in_channels, kt, kh, kw], init);
        let bias = Some(store.add(format!("{name}.bias"), [out_channels], Init::Zeros));
        Self {
            weight,
            bias,
            spec,
            in_channels,
            out_channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv(x, w, b, self.spec)
    }
}
