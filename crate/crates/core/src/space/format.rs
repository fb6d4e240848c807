// JSON text format for genotypes.
//
// {"blocks":[{"connections":[0,1],"dense":[{"op":"FC","dim":64,"bits":8}],
//   "sparse":[{"op":"EFC","dim":16,"bits":8}],"d2s":false,"s2d":true}],
//  "head":{"bits":8}}
//
// Connection 0 is the raw input; i >= 1 is block i. Operators are listed in
// canonical order so identical genotypes serialize to identical bytes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{BlockGene, DenseOp, Genotype, HeadGene, OpChoice, SparseOp};

#[derive(Debug, thiserror::Error)]
pub enum GenotypeError {
    #[error("genotype parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("block {block}: operator {op} listed twice")]
    DuplicateOperator { block: usize, op: &'static str },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OpRecord<K> {
    op: K,
    dim: usize,
    bits: u8,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockRecord {
    connections: Vec<usize>,
    dense: Vec<OpRecord<DenseOp>>,
    sparse: Vec<OpRecord<SparseOp>>,
    d2s: bool,
    s2d: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadRecord {
    bits: u8,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenotypeRecord {
    blocks: Vec<BlockRecord>,
    head: HeadRecord,
}

fn records<K: Copy>(m: &BTreeMap<K, OpChoice>) -> Vec<OpRecord<K>> {
    m.iter()
        .map(|(&op, c)| OpRecord {
            op,
            dim: c.dim,
            bits: c.bits,
        })
        .collect()
}

fn collect_ops<K: Ord + Copy>(
    block: usize,
    recs: Vec<OpRecord<K>>,
    name: impl Fn(K) -> &'static str,
) -> Result<BTreeMap<K, OpChoice>, GenotypeError> {
    let mut m = BTreeMap::new();
    for r in recs {
        if m.insert(r.op, OpChoice { dim: r.dim, bits: r.bits }).is_some() {
            return Err(GenotypeError::DuplicateOperator { block, op: name(r.op) });
        }
    }
    Ok(m)
}

impl Genotype {
    fn record(&self) -> GenotypeRecord {
        GenotypeRecord {
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockRecord {
                    connections: b.connections.iter().copied().collect(),
                    dense: records(&b.dense),
                    sparse: records(&b.sparse),
                    d2s: b.d2s,
                    s2d: b.s2d,
                })
                .collect(),
            head: HeadRecord { bits: self.head.bits },
        }
    }

    /// Compact single-line JSON; stable across runs.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.record()).expect("genotype serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.record()).expect("genotype serializes")
    }

    /// Parses the JSON format. Structural problems (unknown operators,
    /// missing fields) are parse errors carrying line and column; space
    /// membership is checked separately by [`Genotype::validate`].
    pub fn from_json(text: &str) -> Result<Genotype, GenotypeError> {
        let rec: GenotypeRecord = serde_json::from_str(text)?;
        Genotype::from_record(rec)
    }

    pub fn from_value(v: serde_json::Value) -> Result<Genotype, GenotypeError> {
        Genotype::from_record(serde_json::from_value(v)?)
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self.record()).expect("genotype serializes")
    }

    fn from_record(rec: GenotypeRecord) -> Result<Genotype, GenotypeError> {
        let mut blocks = Vec::with_capacity(rec.blocks.len());
        for (i, b) in rec.blocks.into_iter().enumerate() {
            blocks.push(BlockGene {
                connections: b.connections.into_iter().collect(),
                dense: collect_ops(i + 1, b.dense, DenseOp::name)?,
                sparse: collect_ops(i + 1, b.sparse, SparseOp::name)?,
                d2s: b.d2s,
                s2d: b.s2d,
            });
        }
        Ok(Genotype {
            blocks,
            head: HeadGene { bits: rec.head.bits },
        })
    }
}

impl Serialize for Genotype {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.record().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Genotype {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rec = GenotypeRecord::deserialize(d)?;
        Genotype::from_record(rec).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{random_genotype, SpaceConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #[test]
        fn json_round_trip(seed in any::<u64>()) {
            let cfg = SpaceConfig::full();
            let g = random_genotype(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(Genotype::from_json(&g.to_json()).unwrap(), g.clone());
            prop_assert_eq!(Genotype::from_json(&g.to_json_pretty()).unwrap(), g);
        }
    }

    #[test]
    fn unknown_operator_is_a_parse_error() {
        let text = r#"{"blocks":[{"connections":[0],"dense":[{"op":"CONV","dim":16,"bits":8}],
            "sparse":[{"op":"EFC","dim":16,"bits":8}],"d2s":false,"s2d":false}],"head":{"bits":8}}"#;
        let err = Genotype::from_json(text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("CONV") && msg.contains("line"), "{msg}");
    }

    #[test]
    fn duplicate_operator_is_rejected() {
        let text = r#"{"blocks":[{"connections":[0],"dense":[{"op":"FC","dim":16,"bits":8},{"op":"FC","dim":32,"bits":8}],
            "sparse":[{"op":"EFC","dim":16,"bits":8}],"d2s":false,"s2d":false}],"head":{"bits":8}}"#;
        assert!(matches!(
            Genotype::from_json(text),
            Err(GenotypeError::DuplicateOperator { block: 1, op: "FC" })
        ));
    }

    #[test]
    fn foreign_dim_parses_then_fails_validation() {
        let cfg = SpaceConfig { num_blocks: 1, ..SpaceConfig::small() };
        for dim in [1usize, 15, 17, 100, 2000] {
            let text = format!(
                r#"{{"blocks":[{{"connections":[0],"dense":[{{"op":"FC","dim":{dim},"bits":8}}],
                "sparse":[{{"op":"EFC","dim":16,"bits":8}}],"d2s":false,"s2d":false}}],"head":{{"bits":8}}}}"#
            );
            let g = Genotype::from_json(&text).unwrap();
            assert!(g.validate(&cfg).is_err());
        }
    }
}
