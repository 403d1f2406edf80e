//! Named parameter arrays, their tape bindings, and the checkpoint format.
//!
//! Checkpoint layout (all little-endian): `u32` array count, then per array
//! `u32` name length, UTF-8 name, `u32` rank, `u64` extents, `f64` data.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use svt_tensor::{DArray, Tape, Var};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
    Normal(f64),
    /// Conv kernel `[C_out, k_t, k_h, k_w, C_in/g]`: center tap 1 plus
    /// `N(0, std^2)` noise, so the layer starts near identity.
    CenterTap(f64),
}

/// Shape and initializer of one named parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn init_array(spec: &ParamSpec, seed: u64) -> DArray {
    // Per-name streams: initial values do not depend on declaration order,
    // so models sharing parameter names share initial weights.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&spec.name));
    match spec.init {
        Init::Zeros => DArray::zeros(&spec.shape),
        Init::Ones => DArray::full(&spec.shape, 1.0),
        Init::Normal(std) => DArray::randn(&spec.shape, std, &mut rng),
        Init::CenterTap(std) => {
            let ipg = *spec.shape.last().unwrap_or(&1);
            let kvol: usize = spec.shape[1..spec.shape.len() - 1].iter().product();
            let noise = DArray::randn(&spec.shape, std, &mut rng);
            DArray::from_fn(&spec.shape, |i| {
                let center = if (i / ipg) % kvol == kvol / 2 { 1.0 } else { 0.0 };
                center + noise.data()[i]
            })
        }
        Init::TruncNormal(std) => DArray::from_fn(&spec.shape, |_| loop {
            let z = DArray::randn(&[1], 1.0, &mut rng).data()[0];
            if z.abs() <= 2.0 {
                break z * std;
            }
        }),
    }
}

/// Ordered collection of named parameter arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    arrays: IndexMap<String, DArray>,
}

impl ParamSet {
    pub fn init(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut arrays = IndexMap::with_capacity(specs.len());
        for s in specs {
            if arrays.insert(s.name.clone(), init_array(s, seed)).is_some() {
                return Err(CoreError::Contract(format!("duplicate parameter name {}", s.name)));
            }
        }
        Ok(ParamSet { arrays })
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.arrays.values().map(DArray::numel).sum()
    }

    pub fn get(&self, name: &str) -> Option<&DArray> {
        self.arrays.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DArray> {
        self.arrays.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DArray) {
        self.arrays.insert(name.into(), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DArray)> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut DArray)> {
        self.arrays.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Places every array on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &Tape) -> Bound {
        Bound {
            vars: self.arrays.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone()))).collect(),
        }
    }

    /// Checks names and shapes against a model's declaration.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        if specs.len() != self.arrays.len() {
            return Err(CoreError::Checkpoint(format!(
                "expected {} arrays, found {}",
                specs.len(),
                self.arrays.len()
            )));
        }
        for s in specs {
            match self.arrays.get(&s.name) {
                Some(a) if a.shape() == s.shape.as_slice() => {}
                Some(a) => {
                    return Err(CoreError::Checkpoint(format!(
                        "{}: shape {:?}, expected {:?}",
                        s.name,
                        a.shape(),
                        s.shape
                    )))
                }
                None => return Err(CoreError::Checkpoint(format!("missing array {}", s.name))),
            }
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for (name, a) in &self.arrays {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(a.ndim() as u32).to_le_bytes())?;
            for &d in a.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in a.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        fn u32_of(r: &mut impl Read) -> Result<u32> {
            let mut b = [0; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        }
        fn u64_of(r: &mut impl Read) -> Result<u64> {
            let mut b = [0; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        }
        let count = u32_of(&mut r)?;
        let mut arrays = IndexMap::new();
        for _ in 0..count {
            let len = u32_of(&mut r)? as usize;
            let mut name = vec![0; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| CoreError::Checkpoint(e.to_string()))?;
            let rank = u32_of(&mut r)? as usize;
            let shape = (0..rank)
                .map(|_| u64_of(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| u64_of(&mut r).map(f64::from_bits))
                .collect::<Result<Vec<_>>>()?;
            let a = DArray::new(shape, data).map_err(|e| CoreError::Checkpoint(e.to_string()))?;
            arrays.insert(name, a);
        }
        Ok(ParamSet { arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

/// Tape handles for a bound [`ParamSet`].
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    /// Binding over caller-provided nodes, e.g. the leaves of a gradient check.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: pairs.into_iter().collect(),
        }
    }

    /// Handle for `name`.
    ///
    /// # Panics
    /// If the model asks for a parameter it never declared.
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(&v) => v,
            None => panic!("parameter {name} is not bound"),
        }
    }

    /// Gradients after `tape.backward`, zero for parameters that received none.
    pub fn grads(&self, tape: &Tape) -> Vec<(String, DArray)> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let g = tape.grad(v).unwrap_or_else(|| DArray::zeros(&tape.shape(v)));
                (k.clone(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<ParamSpec> {
        vec![
            ParamSpec::new("a.w", &[3, 4], Init::TruncNormal(0.02)),
            ParamSpec::new("a.b", &[4], Init::Zeros),
            ParamSpec::new("g", &[2], Init::Ones),
        ]
    }

    #[test]
    fn init_is_per_name() {
        let p = ParamSet::init(&specs(), 7).unwrap();
        let mut rev = specs();
        rev.reverse();
        let q = ParamSet::init(&rev, 7).unwrap();
        assert_eq!(p.get("a.w"), q.get("a.w"));
        assert!(p.get("a.w").unwrap().data().iter().all(|v| v.abs() <= 0.04));
        assert_ne!(p.get("a.w"), ParamSet::init(&specs(), 8).unwrap().get("a.w"));
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = ParamSet::init(&specs(), 1).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let q = ParamSet::read_from(buf.as_slice()).unwrap();
        assert_eq!(p, q);
        q.check_against(&specs()).unwrap();
        assert!(ParamSet::read_from(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = specs();
        s.push(s[0].clone());
        assert!(ParamSet::init(&s, 0).is_err());
    }
}
