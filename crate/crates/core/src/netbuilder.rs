//! The five encoder-decoder architectures as [`NetworkSpec`] graphs.
//!
//! All share one template: a U-net body of conv/BN/leaky-ReLU blocks with
//! max-pool downsampling, nearest-neighbour upsampling followed by a
//! convolution, skip connections, and deep-supervision heads at 1/4 and 1/2
//! resolution whose logits are upsampled and summed into the final logits.
//! Propagation kinds add a second encoder over the contextual input whose
//! bottleneck is concatenated with the main one and fused by a conv block.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{InputSlot, LayerKind, NetworkSpec, Node, OutputSlot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NetKind {
    #[serde(rename = "roi")]
    Roi,
    #[serde(rename = "lvrv")]
    Lvrv,
    #[serde(rename = "lv")]
    Lv,
    #[serde(rename = "lvrv-noprop")]
    LvrvNoProp,
    #[serde(rename = "lvrv-midstart")]
    LvrvMidStart,
}

impl NetKind {
    pub const ALL: [NetKind; 5] = [
        NetKind::Roi,
        NetKind::Lvrv,
        NetKind::Lv,
        NetKind::LvrvNoProp,
        NetKind::LvrvMidStart,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NetKind::Roi => "roi",
            NetKind::Lvrv => "lvrv",
            NetKind::Lv => "lv",
            NetKind::LvrvNoProp => "lvrv-noprop",
            NetKind::LvrvMidStart => "lvrv-midstart",
        }
    }

    /// Output classes: 1 (heart probability), 4 (BG, LVC, LVM, RVC) or 3 (no RVC).
    pub fn classes(self) -> usize {
        match self {
            NetKind::Roi => 1,
            NetKind::Lv => 3,
            _ => 4,
        }
    }

    pub fn has_context(self) -> bool {
        matches!(self, NetKind::Lvrv | NetKind::Lv | NetKind::LvrvMidStart)
    }

    /// Context channels: previous image plus the one-hot previous mask.
    pub fn context_channels(self) -> usize {
        if self.has_context() {
            1 + self.classes()
        } else {
            0
        }
    }

    pub fn segments_rvc(self) -> bool {
        self.classes() == 4
    }

    pub fn default_input_size(self) -> usize {
        match self {
            NetKind::Roi => 128,
            _ => 192,
        }
    }
}

impl fmt::Display for NetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NetKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::UnknownKind(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub width_multiplier: f64,
    pub base_width: usize,
    pub depth: usize,
    pub input_size: usize,
}

impl NetConfig {
    pub fn new(kind: NetKind, width_multiplier: f64) -> Self {
        NetConfig {
            width_multiplier,
            base_width: 16,
            depth: 4,
            input_size: kind.default_input_size(),
        }
    }

    pub fn with_input_size(mut self, input_size: usize) -> Self {
        self.input_size = input_size;
        self
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    pub fn with_base_width(mut self, base_width: usize) -> Self {
        self.base_width = base_width;
        self
    }

    fn level_width(&self, level: usize) -> usize {
        let base = ((self.base_width as f64 * self.width_multiplier).round() as usize).max(1);
        base << level
    }
}

/// Builds a spec with the default depth, base width and input size.
pub fn build(kind: NetKind, width_multiplier: f64) -> Result<NetworkSpec> {
    build_with(kind, &NetConfig::new(kind, width_multiplier))
}

pub fn build_with(kind: NetKind, cfg: &NetConfig) -> Result<NetworkSpec> {
    if !(cfg.width_multiplier > 0.0 && cfg.width_multiplier.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "width multiplier must be positive, got {}",
            cfg.width_multiplier
        )));
    }
    if cfg.depth == 0 || cfg.input_size == 0 || cfg.input_size % (1 << cfg.depth) != 0 {
        return Err(Error::InvalidArgument(format!(
            "input size {} must be a positive multiple of 2^{}",
            cfg.input_size, cfg.depth
        )));
    }
    let mut g = GraphBuilder::default();
    let mut inputs = vec![InputSlot {
        name: "image".into(),
        channels: 1,
        size: cfg.input_size,
    }];

    let (skips, mut bottom) = g.encoder("enc", "image", 1, cfg);
    if kind.has_context() {
        inputs.push(InputSlot {
            name: "context".into(),
            channels: kind.context_channels(),
            size: cfg.input_size,
        });
        let (_, ctx_bottom) = g.encoder("ctx", "context", kind.context_channels(), cfg);
        let width = cfg.level_width(cfg.depth);
        let cat = g.push("fuse.concat", LayerKind::Concat, &[&bottom, &ctx_bottom]);
        bottom = g.conv_bn_act("fuse", &cat, 2 * width, width);
    }

    // Decoder, coarse to fine; keep outputs per level for deep supervision.
    let mut current = bottom;
    let mut decoded = vec![String::new(); cfg.depth];
    for level in (0..cfg.depth).rev() {
        let width = cfg.level_width(level);
        let up = g.push(&format!("dec{level}.up"), LayerKind::Upsample2, &[&current]);
        let up = g.conv_bn_act(&format!("dec{level}.upconv"), &up, 2 * width, width);
        let cat = g.push(
            &format!("dec{level}.concat"),
            LayerKind::Concat,
            &[&up, &skips[level]],
        );
        current = g.block(&format!("dec{level}"), &cat, 2 * width, width);
        decoded[level] = current.clone();
    }

    let classes = kind.classes();
    let head = |g: &mut GraphBuilder, level: usize| {
        g.push(
            &format!("head{level}"),
            LayerKind::Conv1x1Head {
                in_channels: cfg.level_width(level),
                out_channels: classes,
            },
            &[&decoded[level]],
        )
    };
    // Supervision levels 2 and 1 sit at 1/4 and 1/2 of the input size.
    let mut logits: Option<String> = None;
    for level in (0..cfg.depth.min(3)).rev() {
        let h = head(&mut g, level);
        logits = Some(match logits {
            None => h,
            Some(coarse) => {
                let up = g.push(&format!("ds{level}.up"), LayerKind::Upsample2, &[&coarse]);
                g.push(&format!("ds{level}.add"), LayerKind::Add, &[&up, &h])
            }
        });
    }
    let logits = logits.expect("depth >= 1");
    let out_layer = if classes == 1 {
        LayerKind::Sigmoid
    } else {
        LayerKind::Softmax
    };
    let probs = g.push("probs", out_layer, &[&logits]);

    let spec = NetworkSpec {
        kind,
        inputs,
        nodes: g.nodes,
        outputs: vec![OutputSlot {
            name: "probs".into(),
            node: probs,
        }],
        classes,
    };
    spec.validate()?;
    Ok(spec)
}

/// Spatial sizes of the deep-supervision heads, coarse first.
pub fn supervision_sizes(spec: &NetworkSpec) -> Vec<usize> {
    let size = spec.inputs[0].size;
    let mut levels: Vec<usize> = spec
        .nodes
        .iter()
        .filter_map(|n| n.name.strip_prefix("head").and_then(|l| l.parse().ok()))
        .filter(|&l: &usize| l > 0)
        .collect();
    levels.sort_unstable_by(|a, b| b.cmp(a));
    levels.into_iter().map(|l| size >> l).collect()
}

#[derive(Default)]
struct GraphBuilder {
    nodes: Vec<Node>,
}

impl GraphBuilder {
    fn push(&mut self, name: &str, layer: LayerKind, inputs: &[&str]) -> String {
        self.nodes.push(Node {
            name: name.to_string(),
            layer,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        });
        name.to_string()
    }

    fn conv_bn_act(&mut self, prefix: &str, input: &str, cin: usize, cout: usize) -> String {
        let c = self.push(&format!("{prefix}.conv"), LayerKind::conv3x3(cin, cout), &[input]);
        let b = self.push(&format!("{prefix}.bn"), LayerKind::batchnorm(cout), &[&c]);
        self.push(&format!("{prefix}.act"), LayerKind::leaky_relu(), &[&b])
    }

    /// Two conv/BN/leaky-ReLU units.
    fn block(&mut self, prefix: &str, input: &str, cin: usize, cout: usize) -> String {
        let a = self.conv_bn_act(&format!("{prefix}.a"), input, cin, cout);
        self.conv_bn_act(&format!("{prefix}.b"), &a, cout, cout)
    }

    /// Returns the per-level skip outputs and the bottleneck output.
    fn encoder(
        &mut self,
        prefix: &str,
        input: &str,
        in_channels: usize,
        cfg: &NetConfig,
    ) -> (Vec<String>, String) {
        let mut skips = Vec::with_capacity(cfg.depth);
        let mut current = input.to_string();
        let mut cin = in_channels;
        for level in 0..cfg.depth {
            let width = cfg.level_width(level);
            let out = self.block(&format!("{prefix}{level}"), &current, cin, width);
            skips.push(out.clone());
            current = self.push(&format!("{prefix}{level}.pool"), LayerKind::Maxpool2, &[&out]);
            cin = width;
        }
        let bottom = self.block(
            &format!("{prefix}.bottom"),
            &current,
            cin,
            cfg.level_width(cfg.depth),
        );
        (skips, bottom)
    }
}
