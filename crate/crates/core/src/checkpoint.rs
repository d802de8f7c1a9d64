//! `CKPT1` training checkpoints.
//!
//! One file: a text manifest terminated by `end\n`, then one TSR1 blob per
//! `tensor` line in manifest order.
//!
//! ```text
//! CKPT1
//! config <n>
//! <n bytes of TOML training config>
//! epoch <u64>
//! iteration <u64>
//! rng <64 hex digits of seed> <stream> <word position>
//! adam_t <network> <u64>                      (x4)
//! tensor <network> <slot> <name> <d0>x<d1>... (one per blob)
//! end
//! ```
//!
//! Slots are `param`, `mean`, `var` (batch-norm running statistics),
//! `adam_m` and `adam_v`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Generator, Network, NetworkKey, ParamStore};
use crate::optim::AdamState;
use crate::tensor::Tensor;
use crate::train::{TrainConfig, TrainState};

pub const CKPT1_MAGIC: &str = "CKPT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Slot {
    Param,
    Mean,
    Var,
    AdamM,
    AdamV,
}

impl Slot {
    const ALL: [Slot; 5] = [Slot::Param, Slot::Mean, Slot::Var, Slot::AdamM, Slot::AdamV];

    pub fn name(self) -> &'static str {
        match self {
            Slot::Param => "param",
            Slot::Mean => "mean",
            Slot::Var => "var",
            Slot::AdamM => "adam_m",
            Slot::AdamV => "adam_v",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub net: NetworkKey,
    pub slot: Slot,
    pub name: String,
    pub tensor: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: u64,
    pub iteration: u64,
    pub rng: RngState,
    /// Adam step counters, indexed like [`NetworkKey::ALL`].
    pub adam_t: [u64; 4],
    pub entries: Vec<Entry>,
}

fn stores(state: &TrainState) -> [&ParamStore<f32>; 4] {
    [state.g_ab.store(), state.g_ba.store(), state.d_a.store(), state.d_b.store()]
}

fn stores_mut(state: &mut TrainState) -> [&mut ParamStore<f32>; 4] {
    [state.g_ab.store_mut(), state.g_ba.store_mut(), state.d_a.store_mut(), state.d_b.store_mut()]
}

fn push_store(entries: &mut Vec<Entry>, net: NetworkKey, store: &ParamStore<f32>, adam: Option<&AdamState>) {
    for p in store.params() {
        entries.push(Entry { net, slot: Slot::Param, name: p.name.clone(), tensor: (*p.value).clone() });
    }
    for s in store.norm_stats() {
        entries.push(Entry { net, slot: Slot::Mean, name: s.name.clone(), tensor: s.mean.clone() });
        entries.push(Entry { net, slot: Slot::Var, name: s.name.clone(), tensor: s.var.clone() });
    }
    if let Some(adam) = adam {
        for (slot, bufs) in [(Slot::AdamM, &adam.m), (Slot::AdamV, &adam.v)] {
            for (p, buf) in store.params().iter().zip(bufs) {
                let tensor = Tensor::new(p.value.shape().to_vec(), buf.clone()).expect("moments mirror params");
                entries.push(Entry { net, slot, name: p.name.clone(), tensor });
            }
        }
    }
}

type EntryMap = HashMap<(NetworkKey, Slot, String), Tensor<f32>>;

/// Moves every expected tensor of `store` out of `map`, checking shapes.
fn take_store(
    map: &mut EntryMap,
    net: NetworkKey,
    store: &mut ParamStore<f32>,
    adam: Option<&mut AdamState>,
) -> Result<()> {
    let mut take = |slot: Slot, name: &str, shape: &[usize]| -> Result<Tensor<f32>> {
        let t = map
            .remove(&(net, slot, name.to_string()))
            .ok_or_else(|| Error::Load(format!("checkpoint lacks {} {} {name}", net.name(), slot.name())))?;
        if t.shape() != shape {
            return Err(Error::Load(format!(
                "{} {} {name}: checkpoint shape {:?}, network expects {shape:?}",
                net.name(),
                slot.name(),
                t.shape()
            )));
        }
        Ok(t)
    };
    for p in store.params_mut() {
        p.value = Arc::new(take(Slot::Param, &p.name, p.value.shape())?);
        p.grad = None;
    }
    for s in store.norm_stats_mut() {
        s.mean = take(Slot::Mean, &s.name, s.mean.shape())?;
        s.var = take(Slot::Var, &s.name, s.var.shape())?;
    }
    if let Some(adam) = adam {
        for (i, p) in store.params().iter().enumerate() {
            adam.m[i] = take(Slot::AdamM, &p.name, p.value.shape())?.into_data();
            adam.v[i] = take(Slot::AdamV, &p.name, p.value.shape())?.into_data();
        }
    }
    Ok(())
}

impl Checkpoint {
    pub fn from_state(state: &TrainState) -> Self {
        let mut entries = Vec::new();
        for ((net, store), adam) in NetworkKey::ALL.into_iter().zip(stores(state)).zip(&state.adam) {
            push_store(&mut entries, net, store, Some(adam));
        }
        Checkpoint {
            config: state.config.clone(),
            epoch: state.epoch,
            iteration: state.iteration,
            rng: RngState::capture(&state.rng),
            adam_t: std::array::from_fn(|i| state.adam[i].t),
            entries,
        }
    }

    fn entry_map(&self) -> Result<EntryMap> {
        let mut map = HashMap::with_capacity(self.entries.len());
        for e in &self.entries {
            if map.insert((e.net, e.slot, e.name.clone()), e.tensor.clone()).is_some() {
                return Err(Error::Load(format!("duplicate {} {} {}", e.net.name(), e.slot.name(), e.name)));
            }
        }
        Ok(map)
    }

    /// Rebuilds the training state; every tensor must be present exactly
    /// once with the shape the configured networks expect.
    pub fn into_state(&self) -> Result<TrainState> {
        let mut state = TrainState::new(self.config.clone())?;
        let mut map = self.entry_map()?;
        let mut adam = state.adam.clone();
        for ((net, store), adam) in NetworkKey::ALL.into_iter().zip(stores_mut(&mut state)).zip(&mut adam) {
            take_store(&mut map, net, store, Some(adam))?;
        }
        if let Some((net, slot, name)) = map.keys().next() {
            return Err(Error::Load(format!("unexpected tensor {} {} {name}", net.name(), slot.name())));
        }
        for (a, &t) in adam.iter_mut().zip(&self.adam_t) {
            a.t = t;
        }
        state.adam = adam;
        state.epoch = self.epoch;
        state.iteration = self.iteration;
        state.rng = self.rng.restore();
        Ok(state)
    }

    /// The low-dose to routine-dose generator alone, for inference.
    pub fn generator(&self, key: NetworkKey) -> Result<Generator> {
        if !matches!(key, NetworkKey::GenAB | NetworkKey::GenBA) {
            return Err(Error::contract(format!("{} is not a generator", key.name())));
        }
        let mut g = Generator::new(self.config.generator)?;
        let mut map = self.entry_map()?;
        map.retain(|(net, slot, _), _| *net == key && matches!(slot, Slot::Param | Slot::Mean | Slot::Var));
        take_store(&mut map, key, g.store_mut(), None)?;
        Ok(g)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let config = self.config.to_toml();
        let mut head = format!("{CKPT1_MAGIC}\nconfig {}\n{config}\n", config.len());
        head.push_str(&format!("epoch {}\niteration {}\n", self.epoch, self.iteration));
        let seed: String = self.rng.seed.iter().map(|b| format!("{b:02x}")).collect();
        head.push_str(&format!("rng {seed} {} {}\n", self.rng.stream, self.rng.word_pos));
        for (net, t) in NetworkKey::ALL.iter().zip(self.adam_t) {
            head.push_str(&format!("adam_t {} {t}\n", net.name()));
        }
        for e in &self.entries {
            let shape: Vec<String> = e.tensor.shape().iter().map(|d| d.to_string()).collect();
            head.push_str(&format!("tensor {} {} {} {}\n", e.net.name(), e.slot.name(), e.name, shape.join("x")));
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        for e in &self.entries {
            out.extend_from_slice(&e.tensor.to_tsr1_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.line()? != CKPT1_MAGIC {
            return Err(Error::format("not a CKPT1 checkpoint"));
        }
        let n: usize = parse_field(
            cur.line()?.strip_prefix("config ").ok_or_else(|| Error::format("expected config"))?,
            "config length",
        )?;
        let raw = cur.take(n)?;
        if cur.take(1)? != b"\n" {
            return Err(Error::format("config block not newline-terminated"));
        }
        let text = std::str::from_utf8(raw).map_err(|_| Error::format("config is not UTF-8"))?;
        let config = TrainConfig::parse_toml(text)?;
        let epoch = parse_field(keyed(cur.line()?, "epoch")?, "epoch")?;
        let iteration = parse_field(keyed(cur.line()?, "iteration")?, "iteration")?;
        let rng = parse_rng(keyed(cur.line()?, "rng")?)?;
        let mut adam_t = [0u64; 4];
        for (slot, net) in adam_t.iter_mut().zip(NetworkKey::ALL) {
            let rest = keyed(cur.line()?, "adam_t")?;
            let (name, t) = rest.split_once(' ').ok_or_else(|| Error::format("adam_t needs a network and a count"))?;
            if name != net.name() {
                return Err(Error::format(format!("adam_t for {name}, expected {}", net.name())));
            }
            *slot = parse_field(t, "adam_t")?;
        }
        let mut specs = Vec::new();
        loop {
            let line = cur.line()?;
            if line == "end" {
                break;
            }
            specs.push(parse_tensor_line(keyed(line, "tensor")?)?);
        }
        let mut entries = Vec::with_capacity(specs.len());
        for (net, slot, name, shape) in specs {
            let (tensor, used) = Tensor::from_tsr1_prefix(&bytes[cur.pos..])?;
            cur.pos += used;
            if tensor.shape() != shape.as_slice() {
                return Err(Error::format(format!(
                    "blob for {} {} {name} has shape {:?}, manifest says {shape:?}",
                    net.name(),
                    slot.name(),
                    tensor.shape()
                )));
            }
            entries.push(Entry { net, slot, name, tensor });
        }
        if cur.pos != bytes.len() {
            return Err(Error::format(format!("{} trailing bytes after the last blob", bytes.len() - cur.pos)));
        }
        Ok(Checkpoint { config, epoch, iteration, rng, adam_t, entries })
    }

    /// Writes via a temporary file and a rename so an interrupted save never
    /// clobbers an existing checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    const MAX_LINE: usize = 4096;

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .take(Self::MAX_LINE)
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format("unterminated or overlong manifest line"))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::format("manifest line is not UTF-8"))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format("checkpoint truncated"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

fn keyed<'a>(line: &'a str, key: &str) -> Result<&'a str> {
    line.strip_prefix(key)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| Error::format(format!("expected `{key}` line, got {line:?}")))
}

fn parse_field<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| Error::format(format!("bad {what} {s:?}")))
}

fn parse_rng(s: &str) -> Result<RngState> {
    let f: Vec<&str> = s.split(' ').collect();
    if f.len() != 3 || f[0].len() != 64 || !f[0].is_ascii() {
        return Err(Error::format(format!("bad rng line {s:?}")));
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&f[0][2 * i..2 * i + 2], 16).map_err(|_| Error::format("bad rng seed hex"))?;
    }
    Ok(RngState { seed, stream: parse_field(f[1], "rng stream")?, word_pos: parse_field(f[2], "rng word position")? })
}

fn parse_tensor_line(s: &str) -> Result<(NetworkKey, Slot, String, Vec<usize>)> {
    let f: Vec<&str> = s.split(' ').collect();
    if f.len() != 4 {
        return Err(Error::format(format!("bad tensor line {s:?}")));
    }
    let net = NetworkKey::ALL
        .into_iter()
        .find(|k| k.name() == f[0])
        .ok_or_else(|| Error::format(format!("unknown network {:?}", f[0])))?;
    let slot = Slot::ALL
        .into_iter()
        .find(|k| k.name() == f[1])
        .ok_or_else(|| Error::format(format!("unknown slot {:?}", f[1])))?;
    let name = f[2];
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.')) {
        return Err(Error::format(format!("bad tensor name {name:?}")));
    }
    let shape = f[3].split('x').map(|d| parse_field::<usize>(d, "extent")).collect::<Result<Vec<_>>>()?;
    Ok((net, slot, name.to_string(), shape))
}

#[cfg(test)]
mod tests;
