//! Discrete operon design space: promoter choice, gene order and per-gene RBS level.
//!
//! Designs are enumerated in a fixed canonical order (promoter index major, then
//! lexicographic gene-order permutation, then RBS indices lexicographically) so that
//! seeded runs pick the same designs everywhere.
//!
//! The textual key of a design is `P<int>|<gene list>|R<int>,...,R<int>` where the
//! gene list gives the operon from position 1 onwards and the RBS list is indexed by
//! gene identifier (`g1` first), not by position.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DesignError {
    #[error("invalid catalog: {0}")]
    Catalog(String),
    #[error("malformed design key `{key}`: bad {field}: {message}")]
    Parse {
        key: String,
        field: &'static str,
        message: String,
    },
    #[error("design key `{key}`: {field} index {index} out of range (catalog has {len})")]
    Range {
        key: String,
        field: &'static str,
        index: usize,
        len: usize,
    },
    #[error("gene order is not a permutation: {0}")]
    Permutation(String),
    #[error("unknown gene `{0}`")]
    UnknownGene(String),
}

/// Zero-based gene identifier, displayed as `g1`, `g2`, ...
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GeneId(pub usize);

impl GeneId {
    pub fn name(self) -> String {
        format!("g{}", self.0 + 1)
    }

    pub fn parse(text: &str) -> Option<GeneId> {
        let digits = text.strip_prefix('g')?;
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        let n: usize = digits.parse().ok()?;
        (n >= 1).then(|| GeneId(n - 1))
    }
}

impl fmt::Display for GeneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "g{}", self.0 + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCatalog", into = "RawCatalog")]
pub struct DesignCatalog {
    promoter_strengths: Vec<f64>,
    rbs_strengths: Vec<f64>,
    n_genes: usize,
}

#[derive(Serialize, Deserialize)]
struct RawCatalog {
    promoter_strengths: Vec<f64>,
    rbs_strengths: Vec<f64>,
    n_genes: usize,
}

impl TryFrom<RawCatalog> for DesignCatalog {
    type Error = DesignError;

    fn try_from(raw: RawCatalog) -> Result<Self, Self::Error> {
        DesignCatalog::new(raw.promoter_strengths, raw.rbs_strengths, raw.n_genes)
    }
}

impl From<DesignCatalog> for RawCatalog {
    fn from(c: DesignCatalog) -> Self {
        RawCatalog {
            promoter_strengths: c.promoter_strengths,
            rbs_strengths: c.rbs_strengths,
            n_genes: c.n_genes,
        }
    }
}

fn check_strengths(name: &str, values: &[f64]) -> Result<(), DesignError> {
    if values.is_empty() {
        return Err(DesignError::Catalog(format!("{name} list is empty")));
    }
    if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(DesignError::Catalog(format!(
            "{name} strength {v} is not strictly positive"
        )));
    }
    if values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DesignError::Catalog(format!(
            "{name} strengths must be strictly increasing"
        )));
    }
    Ok(())
}

impl DesignCatalog {
    pub fn new(
        promoter_strengths: Vec<f64>,
        rbs_strengths: Vec<f64>,
        n_genes: usize,
    ) -> Result<Self, DesignError> {
        check_strengths("promoter", &promoter_strengths)?;
        check_strengths("rbs", &rbs_strengths)?;
        if n_genes == 0 {
            return Err(DesignError::Catalog("n_genes must be positive".into()));
        }
        Ok(DesignCatalog {
            promoter_strengths,
            rbs_strengths,
            n_genes,
        })
    }

    pub fn promoter_strengths(&self) -> &[f64] {
        &self.promoter_strengths
    }

    pub fn rbs_strengths(&self) -> &[f64] {
        &self.rbs_strengths
    }

    pub fn n_genes(&self) -> usize {
        self.n_genes
    }

    pub fn genes(&self) -> impl Iterator<Item = GeneId> {
        (0..self.n_genes).map(GeneId)
    }

    /// `|promoters| * n_genes! * |rbs|^n_genes`
    pub fn design_count(&self) -> usize {
        let perms: usize = (1..=self.n_genes).product();
        self.promoter_strengths.len() * perms * self.rbs_strengths.len().pow(self.n_genes as u32)
    }

    pub fn promoter_strength(&self, genome: &DesignGenome) -> f64 {
        self.promoter_strengths[genome.promoter_index]
    }

    pub fn rbs_strength(&self, genome: &DesignGenome, gene: GeneId) -> f64 {
        self.rbs_strengths[genome.rbs_index[gene.0]]
    }

    pub fn validate(&self, genome: &DesignGenome) -> Result<(), DesignError> {
        let key = genome.key();
        if genome.promoter_index >= self.promoter_strengths.len() {
            return Err(DesignError::Range {
                key,
                field: "promoter",
                index: genome.promoter_index,
                len: self.promoter_strengths.len(),
            });
        }
        if genome.gene_order.len() != self.n_genes || genome.rbs_index.len() != self.n_genes {
            return Err(DesignError::Parse {
                key,
                field: "gene_order",
                message: format!("expected {} genes", self.n_genes),
            });
        }
        check_permutation(&genome.gene_order)?;
        if let Some(&bad) = genome.rbs_index.iter().find(|&&i| i >= self.rbs_strengths.len()) {
            return Err(DesignError::Range {
                key,
                field: "rbs",
                index: bad,
                len: self.rbs_strengths.len(),
            });
        }
        Ok(())
    }
}

impl Default for DesignCatalog {
    fn default() -> Self {
        DesignCatalog::new(vec![1.0, 3.0], vec![0.5, 1.0, 2.0], 3).expect("valid default catalog")
    }
}

fn check_permutation(order: &[GeneId]) -> Result<(), DesignError> {
    let n = order.len();
    let mut seen = vec![false; n];
    for g in order {
        if g.0 >= n || seen[g.0] {
            let names: Vec<String> = order.iter().map(|g| g.name()).collect();
            return Err(DesignError::Permutation(names.join(",")));
        }
        seen[g.0] = true;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DesignGenome {
    pub promoter_index: usize,
    /// Gene at operon position 1, 2, ...
    pub gene_order: Vec<GeneId>,
    /// RBS index per gene, indexed by gene id.
    pub rbs_index: Vec<usize>,
}

impl DesignGenome {
    pub fn key(&self) -> String {
        let genes: Vec<String> = self.gene_order.iter().map(|g| g.name()).collect();
        let rbs: Vec<String> = self.rbs_index.iter().map(|r| format!("R{r}")).collect();
        format!("P{}|{}|{}", self.promoter_index, genes.join(","), rbs.join(","))
    }

    /// 1-based operon position of `gene`.
    pub fn position_of(&self, gene: GeneId) -> Result<usize, DesignError> {
        self.gene_order
            .iter()
            .position(|&g| g == gene)
            .map(|p| p + 1)
            .ok_or_else(|| DesignError::UnknownGene(gene.name()))
    }
}

impl fmt::Display for DesignGenome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

pub fn encode_design(genome: &DesignGenome) -> String {
    genome.key()
}

pub fn decode_design(key: &str, catalog: &DesignCatalog) -> Result<DesignGenome, DesignError> {
    let parse_err = |field: &'static str, message: String| DesignError::Parse {
        key: key.to_string(),
        field,
        message,
    };
    let parts: Vec<&str> = key.split('|').collect();
    if parts.len() != 3 {
        return Err(parse_err(
            "layout",
            format!("expected 3 `|`-separated fields, found {}", parts.len()),
        ));
    }
    let promoter_index = parts[0]
        .strip_prefix('P')
        .and_then(parse_index)
        .ok_or_else(|| parse_err("promoter", format!("`{}` is not P<int>", parts[0])))?;
    let gene_order = parts[1]
        .split(',')
        .map(|g| GeneId::parse(g).ok_or_else(|| parse_err("gene_order", format!("`{g}` is not a gene id"))))
        .collect::<Result<Vec<_>, _>>()?;
    let rbs_index = parts[2]
        .split(',')
        .map(|r| {
            r.strip_prefix('R')
                .and_then(parse_index)
                .ok_or_else(|| parse_err("rbs", format!("`{r}` is not R<int>")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if gene_order.len() != catalog.n_genes() {
        return Err(parse_err(
            "gene_order",
            format!("expected {} genes, found {}", catalog.n_genes(), gene_order.len()),
        ));
    }
    if rbs_index.len() != catalog.n_genes() {
        return Err(parse_err(
            "rbs",
            format!("expected {} RBS indices, found {}", catalog.n_genes(), rbs_index.len()),
        ));
    }
    let genome = DesignGenome {
        promoter_index,
        gene_order,
        rbs_index,
    };
    catalog.validate(&genome)?;
    Ok(genome)
}

fn parse_index(s: &str) -> Option<usize> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    s.parse().ok()
}

pub fn position_of(genome: &DesignGenome, gene: GeneId) -> Result<usize, DesignError> {
    genome.position_of(gene)
}

/// Rearranges `v` into the next lexicographic permutation; false once the last one is reached.
fn next_permutation<T: Ord>(v: &mut [T]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let mut i = v.len() - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = v.len() - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

pub fn enumerate_designs(catalog: &DesignCatalog) -> Vec<DesignGenome> {
    let n = catalog.n_genes();
    let n_rbs = catalog.rbs_strengths().len();
    let mut perms = Vec::new();
    let mut order: Vec<GeneId> = catalog.genes().collect();
    loop {
        perms.push(order.clone());
        if !next_permutation(&mut order) {
            break;
        }
    }
    let mut out = Vec::with_capacity(catalog.design_count());
    for promoter_index in 0..catalog.promoter_strengths().len() {
        for perm in &perms {
            let mut rbs = vec![0usize; n];
            'odometer: loop {
                out.push(DesignGenome {
                    promoter_index,
                    gene_order: perm.clone(),
                    rbs_index: rbs.clone(),
                });
                // last gene fastest
                let mut k = n;
                loop {
                    if k == 0 {
                        break 'odometer;
                    }
                    k -= 1;
                    rbs[k] += 1;
                    if rbs[k] < n_rbs {
                        break;
                    }
                    rbs[k] = 0;
                }
            }
        }
    }
    out
}
