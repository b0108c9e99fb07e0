//! Text checkpoint format: a tag line with the version, a `meta` line, one
//! `tensor <name> <rows> <cols>` block per named parameter (17-significant-
//! digit decimal rows), and an `end` sentinel. Human-diffable, language-
//! portable, and bit-exact on round trip.

use std::collections::BTreeMap;

use anyhow::{anyhow, bail, Context, Result};
use carrnn_core::cells::CellKind;
use carrnn_core::dataset::{FillMode, Standardizer};
use carrnn_core::numerics::Activation;
use carrnn_core::train::init_params;
use carrnn_core::Model;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TAG: &str = "carrnn-checkpoint";
const VERSION: u32 = 1;

/// A trained model plus everything needed to run it on raw data.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub standardizer: Standardizer,
    pub fill: Option<FillMode>,
    /// Nominal step in normalized time units (bin width and correction step).
    pub tau: f64,
}

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

impl Checkpoint {
    pub fn save(&self) -> Result<String> {
        let model = &self.model;
        let (act_h, act_g, act_c, peepholes) = activations_of(model);
        let mut out = String::new();
        out.push_str(&format!("{TAG} v{VERSION}\n"));
        out.push_str(&format!(
            "meta cell={} n_features={} n_in={} m={} q={} tau={} act_h={} act_g={} act_c={} act_y=identity peepholes={} fill={}\n",
            model.kind.name(),
            self.standardizer.n_features(),
            model.input_dim(),
            model.hidden_dim(),
            model.output_dim(),
            fmt(self.tau),
            act_h.name(),
            act_g.name(),
            act_c.name(),
            if peepholes { 1 } else { 0 },
            self.fill.map_or("none", |f| f.name()),
        ));

        let mut write_tensor = |name: &str, rows: usize, cols: usize, data: &[f64]| -> Result<()> {
            if data.iter().any(|x| !x.is_finite()) {
                bail!("checkpoint: tensor {name} contains non-finite values");
            }
            out.push_str(&format!("tensor {name} {rows} {cols}\n"));
            for r in 0..rows {
                let row: Vec<String> = data[r * cols..(r + 1) * cols].iter().map(|&x| fmt(x)).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
            Ok(())
        };

        let n_raw = self.standardizer.n_features();
        write_tensor("feat_mean", 1, n_raw, &self.standardizer.mean)?;
        write_tensor("feat_std", 1, n_raw, &self.standardizer.std)?;
        write_tensor("time_iqr", 1, 1, &[self.standardizer.time_iqr])?;
        let descs = model.tensor_descs();
        let data = model.tensor_data();
        for (desc, tensor) in descs.iter().zip(&data) {
            write_tensor(desc.name, desc.rows, desc.cols, tensor)?;
        }
        out.push_str("end\n");
        Ok(out)
    }

    pub fn load(text: &str) -> Result<Checkpoint> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| anyhow!("checkpoint: empty file"))?;
        let expected = format!("{TAG} v{VERSION}");
        if header.trim() != expected {
            bail!("checkpoint: version mismatch: expected '{expected}', got '{header}'");
        }
        let meta_line = lines.next().ok_or_else(|| anyhow!("checkpoint: missing meta line"))?;
        let meta = parse_meta(meta_line)?;

        let cell_name = meta.get_str("cell")?;
        let cell = CellKind::parse(cell_name)
            .ok_or_else(|| anyhow!("checkpoint: unknown cell '{cell_name}'"))?;
        let n_features: usize = meta.get("n_features")?;
        let n_in: usize = meta.get("n_in")?;
        let m: usize = meta.get("m")?;
        let q: usize = meta.get("q")?;
        let tau: f64 = meta.get("tau")?;
        let act_h = Activation::parse(meta.get_str("act_h")?)
            .ok_or_else(|| anyhow!("checkpoint: bad act_h"))?;
        let act_y = meta.get_str("act_y")?;
        if act_y != "identity" {
            bail!("checkpoint: unsupported output activation '{act_y}'");
        }
        let peepholes = meta.get_str("peepholes")? == "1";
        let fill = match meta.get_str("fill")? {
            "none" => None,
            other => Some(
                FillMode::parse(other)
                    .ok_or_else(|| anyhow!("checkpoint: unknown fill mode '{other}'"))?,
            ),
        };

        // Read tensor blocks.
        let mut tensors: BTreeMap<String, (usize, usize, Vec<f64>)> = BTreeMap::new();
        let mut lines = lines.peekable();
        loop {
            let line = lines
                .next()
                .ok_or_else(|| anyhow!("checkpoint: missing end sentinel"))?;
            let line = line.trim();
            if line == "end" {
                break;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != "tensor" {
                bail!("checkpoint: expected 'tensor <name> <rows> <cols>', got '{line}'");
            }
            let name = parts[1].to_string();
            let rows: usize = parts[2].parse().context("checkpoint: bad tensor rows")?;
            let cols: usize = parts[3].parse().context("checkpoint: bad tensor cols")?;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let row = lines
                    .next()
                    .ok_or_else(|| anyhow!("checkpoint: truncated tensor '{name}'"))?;
                for field in row.split_whitespace() {
                    data.push(
                        field
                            .parse::<f64>()
                            .with_context(|| format!("checkpoint: bad value in tensor '{name}'"))?,
                    );
                }
            }
            if data.len() != rows * cols {
                bail!("checkpoint: tensor '{name}' has {} values, expected {}", data.len(), rows * cols);
            }
            tensors.insert(name, (rows, cols, data));
        }

        let take = |tensors: &mut BTreeMap<String, (usize, usize, Vec<f64>)>, name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| anyhow!("checkpoint: missing tensor '{name}'"))
        };
        let (_, _, mean) = take(&mut tensors, "feat_mean")?;
        let (_, _, std) = take(&mut tensors, "feat_std")?;
        let (_, _, iqr) = take(&mut tensors, "time_iqr")?;
        let standardizer = Standardizer {
            mean,
            std,
            time_iqr: iqr[0],
        };

        // Build a skeleton of the right shape, then overwrite every tensor.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = init_params(cell, n_in, m, q, tau, act_h, peepholes, &mut rng);
        let descs = model.tensor_descs();
        for (ti, slot) in model.tensor_data_mut().into_iter().enumerate() {
            let desc = descs[ti];
            let (rows, cols, data) = take(&mut tensors, desc.name)?;
            if rows != desc.rows || cols != desc.cols {
                bail!(
                    "checkpoint: tensor '{}' is {}x{}, expected {}x{}",
                    desc.name,
                    rows,
                    cols,
                    desc.rows,
                    desc.cols
                );
            }
            slot.copy_from_slice(&data);
        }
        if let Some(extra) = tensors.keys().next() {
            bail!("checkpoint: unexpected tensor '{extra}'");
        }
        if n_features != standardizer.n_features() {
            bail!("checkpoint: meta n_features disagrees with feat_mean length");
        }
        Ok(Checkpoint {
            model,
            standardizer,
            fill,
            tau,
        })
    }
}

fn activations_of(model: &Model) -> (Activation, Activation, Activation, bool) {
    use carrnn_core::cells::CellParams;
    match &model.cell {
        CellParams::Rnn(p) => (p.act_h, Activation::Sigmoid, Activation::Tanh, false),
        CellParams::Lstm(p) => (p.act_h, p.act_g, p.act_c, p.peepholes),
        CellParams::Gru(p) => (p.act_h, p.act_g, Activation::Tanh, false),
    }
}

struct Meta(BTreeMap<String, String>);

impl Meta {
    fn get_str(&self, key: &str) -> Result<&str> {
        self.0
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| anyhow!("checkpoint: meta key '{key}' missing"))
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get_str(key)?
            .parse()
            .map_err(|_| anyhow!("checkpoint: meta key '{key}' unparsable"))
    }
}

fn parse_meta(line: &str) -> Result<Meta> {
    let rest = line
        .strip_prefix("meta ")
        .ok_or_else(|| anyhow!("checkpoint: expected meta line, got '{line}'"))?;
    let mut map = BTreeMap::new();
    for pair in rest.split_whitespace() {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| anyhow!("checkpoint: bad meta field '{pair}'"))?;
        map.insert(k.to_string(), v.to_string());
    }
    Ok(Meta(map))
}
