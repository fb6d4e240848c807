use std::fmt::Write;

use super::{Genotype, RAW};

/// Graphviz rendering: one node per block labelled with its operators and
/// dims, one edge per connection. Blocks that never reach the head are
/// drawn dashed.
pub fn to_dot(g: &Genotype) -> String {
    let used = g.used_blocks();
    let mut s = String::new();
    s.push_str("digraph genotype {\n  rankdir=LR;\n");
    s.push_str("  raw [label=\"raw inputs\", shape=box];\n");
    for (i, b) in g.blocks.iter().enumerate() {
        let n = i + 1;
        let dense: Vec<String> = b.dense.iter().map(|(op, c)| format!("{}:{}", op.name(), c.dim)).collect();
        let sparse: Vec<String> = b.sparse.iter().map(|(op, c)| format!("{}:{}", op.name(), c.dim)).collect();
        let mut label = format!("B{n}\\ndense: {}\\nsparse: {}", dense.join(" "), sparse.join(" "));
        if b.d2s || b.s2d {
            let mut m = Vec::new();
            if b.d2s {
                m.push("d2s");
            }
            if b.s2d {
                m.push("s2d");
            }
            let _ = write!(label, "\\nmerge: {}", m.join(" "));
        }
        let style = if used[n] { "solid" } else { "dashed" };
        let _ = writeln!(s, "  b{n} [label=\"{label}\", shape=box, style={style}];");
    }
    s.push_str("  head [label=\"FC head\", shape=ellipse];\n");
    for (i, b) in g.blocks.iter().enumerate() {
        for &src in &b.connections {
            let from = if src == RAW { "raw".to_string() } else { format!("b{src}") };
            let _ = writeln!(s, "  {from} -> b{};", i + 1);
        }
    }
    if !g.blocks.is_empty() {
        let _ = writeln!(s, "  b{} -> head;", g.blocks.len());
    }
    s.push_str("}\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{random_genotype, BlockGene, DenseOp, HeadGene, OpChoice, SpaceConfig, SparseOp};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Minimal checker for the DOT subset emitted above:
    /// `digraph ID { (stmt ;)* }` with node, edge and attribute statements.
    fn check_dot(text: &str) -> Result<(), String> {
        let body = text
            .trim()
            .strip_prefix("digraph ")
            .ok_or("missing digraph")?
            .split_once('{')
            .ok_or("missing {")?
            .1
            .strip_suffix('}')
            .ok_or("missing }")?;
        let id = |t: &str| !t.is_empty() && t.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
        for stmt in body.split(";\n").map(str::trim).filter(|l| !l.is_empty()) {
            let stmt = stmt.trim_end_matches(';');
            if let Some((lhs, rhs)) = stmt.split_once(" -> ") {
                if !id(lhs) || !id(rhs) {
                    return Err(format!("bad edge: {stmt}"));
                }
            } else if let Some((name, attrs)) = stmt.split_once(' ') {
                if !id(name) {
                    return Err(format!("bad node id: {stmt}"));
                }
                let inner = attrs
                    .strip_prefix('[')
                    .and_then(|a| a.strip_suffix(']'))
                    .ok_or(format!("bad attrs: {stmt}"))?;
                if inner.matches('"').count() % 2 != 0 {
                    return Err(format!("unbalanced quotes: {stmt}"));
                }
            } else if !stmt.contains('=') {
                return Err(format!("bad statement: {stmt}"));
            }
        }
        Ok(())
    }

    fn block(conns: &[usize]) -> BlockGene {
        BlockGene {
            connections: conns.iter().copied().collect(),
            dense: [(DenseOp::Fc, OpChoice { dim: 16, bits: 8 })].into(),
            sparse: [(SparseOp::Efc, OpChoice { dim: 16, bits: 8 })].into(),
            d2s: false,
            s2d: false,
        }
    }

    fn block_edges(dot: &str) -> Vec<String> {
        dot.lines()
            .filter(|l| l.contains("->") && !l.contains("head"))
            .map(|l| l.trim().trim_end_matches(';').to_string())
            .collect()
    }

    #[test]
    fn chain_is_a_path() {
        let g = Genotype {
            blocks: vec![block(&[0]), block(&[1]), block(&[2])],
            head: HeadGene { bits: 8 },
        };
        let dot = to_dot(&g);
        assert_eq!(block_edges(&dot), vec!["raw -> b1", "b1 -> b2", "b2 -> b3"]);
        assert!(!dot.contains("dashed"));
        check_dot(&dot).unwrap();
    }

    #[test]
    fn dense_connectivity_has_six_edges() {
        let g = Genotype {
            blocks: vec![block(&[0]), block(&[0, 1]), block(&[0, 1, 2])],
            head: HeadGene { bits: 8 },
        };
        let edges = block_edges(&to_dot(&g));
        assert_eq!(edges.len(), 6);
        for e in ["raw -> b1", "raw -> b2", "b1 -> b2", "raw -> b3", "b1 -> b3", "b2 -> b3"] {
            assert!(edges.iter().any(|x| x == e), "{e}");
        }
    }

    #[test]
    fn unused_blocks_are_dashed_and_output_parses() {
        let g = Genotype {
            blocks: vec![block(&[0]), block(&[0]), block(&[0, 1])],
            head: HeadGene { bits: 8 },
        };
        let dot = to_dot(&g);
        assert!(dot.lines().any(|l| l.contains("b2 [") && l.contains("dashed")));
        check_dot(&dot).unwrap();
        let cfg = SpaceConfig::full();
        for seed in 0..50 {
            check_dot(&to_dot(&random_genotype(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)))).unwrap();
        }
    }
}
