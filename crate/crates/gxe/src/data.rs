//! Trial, genotype and environment-covariate tables: file ingestion,
//! validation, marker encoding and covariate normalization.
//!
//! Three CSV files describe an experiment:
//!
//! * `trials.csv` — `variety_id,environment_id,location,year,trait,value`,
//!   one row per measured plot; an environment is a location-year.
//! * `genotypes.csv` — `variety_id,sequence` with one SNP call per character
//!   (wide per-marker columns are accepted as an alternative layout).
//! * `env.csv` — `environment_id,period,variable,value` holding one weather
//!   covariate per (environment, period, variable); the six periods are
//!   fixed and ordered.
//!
//! SNP calls use the single-character codes A, C, G, T for homozygotes and
//! K = G/T, M = A/C, R = A/G, Y = C/T for heterozygotes; `-` marks a missing
//! call (configurable). Marker dosages count copies of the major allele,
//! with mean imputation for missing calls.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::GxeError;
use crate::Result;

/// The six within-season periods of the environment covariates, in order.
pub const PERIODS: [&str; 6] = ["winter", "march", "april", "may", "june", "july"];

/// Default marker for a missing SNP call.
pub const DEFAULT_MISSING: u8 = b'-';

/// Homozygote and heterozygote call codes accepted in genotype files.
pub const SNP_ALPHABET: [u8; 8] = *b"ACGTKMRY";

/// The two alleles carried by a SNP call code.
pub fn allele_pair(call: u8) -> Option<(u8, u8)> {
    match call {
        b'A' => Some((b'A', b'A')),
        b'C' => Some((b'C', b'C')),
        b'G' => Some((b'G', b'G')),
        b'T' => Some((b'T', b'T')),
        b'K' => Some((b'G', b'T')),
        b'M' => Some((b'A', b'C')),
        b'R' => Some((b'A', b'G')),
        b'Y' => Some((b'C', b'T')),
        _ => None,
    }
}

/// Measured trait of a trial record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraitKind {
    /// Grain yield (dt/ha).
    Yield,
    /// Grain protein content (%).
    Protein,
}

impl TraitKind {
    /// Parses the trait name used in files and on the command line.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "yield" => Ok(TraitKind::Yield),
            "protein" => Ok(TraitKind::Protein),
            other => Err(GxeError::Format(format!(
                "unknown trait {other:?}; expected \"yield\" or \"protein\""
            ))),
        }
    }

    /// The file and command-line name of the trait.
    pub fn name(&self) -> &'static str {
        match self {
            TraitKind::Yield => "yield",
            TraitKind::Protein => "protein",
        }
    }
}

impl fmt::Display for TraitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One row of a trials file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    /// Variety (genotype) identifier.
    pub variety_id: String,
    /// Environment (location-year) identifier.
    pub environment_id: String,
    /// Location part of the environment, kept verbatim.
    pub location: String,
    /// Year part of the environment, kept verbatim.
    pub year: String,
    /// Which trait the value measures.
    pub trait_kind: TraitKind,
    /// Measured value.
    pub value: f64,
}

/// SNP sequences of all varieties, aligned to a common marker set.
#[derive(Debug, Clone, PartialEq)]
pub struct GenotypeTable {
    ids: Vec<String>,
    sequences: Vec<Vec<u8>>,
    missing: u8,
    index: HashMap<String, usize>,
}

impl GenotypeTable {
    /// Builds a table from id/sequence pairs, validating the alphabet and a
    /// shared sequence length.
    pub fn new(rows: Vec<(String, String)>, missing: u8) -> Result<Self> {
        if rows.is_empty() {
            return Err(GxeError::Degenerate("genotype table has no rows".into()));
        }
        let mut ids = Vec::with_capacity(rows.len());
        let mut sequences = Vec::with_capacity(rows.len());
        let mut expected = None;
        for (id, seq) in rows {
            let bytes = seq.into_bytes();
            if bytes.is_empty() {
                return Err(GxeError::Degenerate(format!(
                    "variety {id:?} has an empty sequence"
                )));
            }
            match expected {
                None => expected = Some(bytes.len()),
                Some(len) if len != bytes.len() => {
                    return Err(GxeError::LengthMismatch {
                        variety: id,
                        expected: len,
                        found: bytes.len(),
                    });
                }
                Some(_) => {}
            }
            for (pos, &b) in bytes.iter().enumerate() {
                if b != missing && !SNP_ALPHABET.contains(&b) {
                    return Err(GxeError::UnknownSymbol {
                        variety: id,
                        position: pos + 1,
                        symbol: b as char,
                    });
                }
            }
            ids.push(id);
            sequences.push(bytes);
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (row, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), row).is_some() {
                return Err(GxeError::Format(format!(
                    "duplicate variety id {id:?} in genotype table"
                )));
            }
        }
        Ok(Self {
            ids,
            sequences,
            missing,
            index,
        })
    }

    /// Number of varieties.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    /// True when the table holds no varieties (never, by construction).
    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of markers shared by all sequences.
    pub fn n_markers(&self) -> usize {
        self.sequences[0].len()
    }

    /// Variety identifiers in file order.
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Row index of a variety id.
    pub fn row(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// SNP calls of one variety.
    pub fn sequence(&self, row: usize) -> &[u8] {
        &self.sequences[row]
    }

    /// The byte marking a missing call.
    pub fn missing_symbol(&self) -> u8 {
        self.missing
    }

}

/// Reads a genotype CSV with the default missing symbol `-`.
///
/// Two layouts are accepted: `variety_id,sequence` with the calls packed in
/// one string, or `variety_id` followed by one column per marker.
pub fn load_genotypes(path: impl AsRef<Path>) -> Result<GenotypeTable> {
    load_genotypes_with_missing(path, DEFAULT_MISSING)
}

/// Reads a genotype CSV with a caller-chosen missing-call symbol.
pub fn load_genotypes_with_missing(path: impl AsRef<Path>, missing: u8) -> Result<GenotypeTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())?;
    let header: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.first().map(String::as_str) != Some("variety_id") || header.len() < 2 {
        return Err(GxeError::Format(format!(
            "genotype file must start with a variety_id column followed by \
             a sequence column or per-marker columns; found header {header:?}"
        )));
    }
    let packed = header.len() == 2 && header[1] == "sequence";
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != header.len() {
            return Err(GxeError::Format(format!(
                "genotype row {} has {} fields, expected {}",
                line + 1,
                record.len(),
                header.len()
            )));
        }
        let id = record[0].trim().to_string();
        let seq = if packed {
            record[1].trim().to_string()
        } else {
            let mut s = String::with_capacity(header.len() - 1);
            for field in record.iter().skip(1) {
                let cell = field.trim();
                if cell.chars().count() != 1 {
                    return Err(GxeError::Format(format!(
                        "genotype row {} holds {cell:?} in a per-marker column; \
                         expected a single call symbol",
                        line + 1
                    )));
                }
                s.push_str(cell);
            }
            s
        };
        rows.push((id, seq));
    }
    GenotypeTable::new(rows, missing)
}

/// Writes a genotype table in the packed `variety_id,sequence` layout.
pub fn write_genotypes(path: impl AsRef<Path>, table: &GenotypeTable) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    writer.write_record(["variety_id", "sequence"])?;
    for (id, seq) in table.ids.iter().zip(&table.sequences) {
        writer.write_record([id.as_str(), std::str::from_utf8(seq).expect("validated ascii")])?;
    }
    writer.flush()?;
    Ok(())
}

/// Major-allele dosage matrix: varieties by markers, entries in `[0, 2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiallelicMatrix {
    ids: Vec<String>,
    dosages: DMatrix<f64>,
}

impl BiallelicMatrix {
    /// Variety identifiers, aligned with the rows.
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Number of markers (columns).
    pub fn n_markers(&self) -> usize {
        self.dosages.ncols()
    }

    /// The dosage matrix.
    pub fn dosages(&self) -> &DMatrix<f64> {
        &self.dosages
    }

    /// One variety's dosage row.
    pub fn row(&self, i: usize) -> nalgebra::RowDVector<f64> {
        self.dosages.row(i).into_owned()
    }
}

/// Encodes SNP calls as major-allele dosages.
///
/// Per marker, every call contributes its two alleles; the major allele is
/// the most frequent one, with frequency ties broken toward the
/// lexicographically smaller symbol. A call's dosage is how many copies of
/// the major allele it carries (0, 1 or 2); missing calls receive the marker
/// mean over non-missing dosages.
pub fn encode_biallelic(table: &GenotypeTable) -> Result<BiallelicMatrix> {
    let n = table.len();
    let m = table.n_markers();
    let missing = table.missing_symbol();
    let mut dosages = DMatrix::zeros(n, m);
    for j in 0..m {
        // Allele counts over all non-missing calls at this marker.
        let mut counts: HashMap<u8, u32> = HashMap::new();
        for i in 0..n {
            let call = table.sequence(i)[j];
            if call == missing {
                continue;
            }
            let (a, b) = allele_pair(call).expect("alphabet validated at load");
            *counts.entry(a).or_insert(0) += 1;
            *counts.entry(b).or_insert(0) += 1;
        }
        let major = counts
            .iter()
            .map(|(&allele, &count)| (count, std::cmp::Reverse(allele)))
            .max()
            .map(|(_, std::cmp::Reverse(allele))| allele)
            .ok_or_else(|| {
                GxeError::Degenerate(format!(
                    "marker {} of {} has no non-missing calls",
                    j + 1,
                    m
                ))
            })?;
        let mut sum = 0.0;
        let mut observed = 0usize;
        for i in 0..n {
            let call = table.sequence(i)[j];
            if call == missing {
                dosages[(i, j)] = f64::NAN;
                continue;
            }
            let (a, b) = allele_pair(call).expect("alphabet validated at load");
            let dose = (a == major) as u8 + (b == major) as u8;
            dosages[(i, j)] = f64::from(dose);
            sum += f64::from(dose);
            observed += 1;
        }
        let mean = sum / observed as f64;
        for i in 0..n {
            if dosages[(i, j)].is_nan() {
                dosages[(i, j)] = mean;
            }
        }
    }
    Ok(BiallelicMatrix {
        ids: table.ids.clone(),
        dosages,
    })
}

/// Per-period weather covariates of all environments.
///
/// Each environment carries a 6-by-p matrix: one row per period in
/// [`PERIODS`] order, one column per variable.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvTable {
    ids: Vec<String>,
    variables: Vec<String>,
    values: Vec<DMatrix<f64>>,
    index: HashMap<String, usize>,
}

impl EnvTable {
    /// Builds a table from per-environment 6-by-p matrices.
    pub fn new(
        ids: Vec<String>,
        variables: Vec<String>,
        values: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        if ids.is_empty() {
            return Err(GxeError::Degenerate("environment table has no rows".into()));
        }
        if variables.is_empty() {
            return Err(GxeError::Degenerate(
                "environment table has no variables".into(),
            ));
        }
        if ids.len() != values.len() {
            return Err(GxeError::Dimension {
                what: "environment ids and value matrices",
                expected: ids.len(),
                found: values.len(),
            });
        }
        for (id, m) in ids.iter().zip(&values) {
            if m.nrows() != PERIODS.len() || m.ncols() != variables.len() {
                return Err(GxeError::Format(format!(
                    "environment {id:?} carries a {}x{} covariate matrix, expected {}x{}",
                    m.nrows(),
                    m.ncols(),
                    PERIODS.len(),
                    variables.len()
                )));
            }
            if let Some(v) = m.iter().find(|v| !v.is_finite()) {
                return Err(GxeError::NonFinite(format!(
                    "environment {id:?} carries a non-finite covariate {v}"
                )));
            }
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (row, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), row).is_some() {
                return Err(GxeError::Format(format!(
                    "duplicate environment id {id:?} in environment table"
                )));
            }
        }
        Ok(Self {
            ids,
            variables,
            values,
            index,
        })
    }

    /// Number of environments.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    /// True when the table holds no environments (never, by construction).
    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Environment identifiers in file order.
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Variable names in file order.
    pub fn variables(&self) -> &[String] {
        &self.variables
    }

    /// Row index of an environment id.
    pub fn row(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// The 6-by-p covariate matrix of one environment.
    pub fn series(&self, row: usize) -> &DMatrix<f64> {
        &self.values[row]
    }

}

/// Reads an environment covariate CSV (`environment_id,period,variable,value`).
pub fn load_env(path: impl AsRef<Path>) -> Result<EnvTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())?;
    let header: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header != ["environment_id", "period", "variable", "value"] {
        return Err(GxeError::Format(format!(
            "environment file header must be environment_id,period,variable,value; \
             found {header:?}"
        )));
    }
    let mut ids: Vec<String> = Vec::new();
    let mut id_index: HashMap<String, usize> = HashMap::new();
    let mut variables: Vec<String> = Vec::new();
    let mut var_index: HashMap<String, usize> = HashMap::new();
    // Sparse collection: (env, period, variable) -> value.
    let mut cells: HashMap<(usize, usize, usize), f64> = HashMap::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != 4 {
            return Err(GxeError::Format(format!(
                "environment row {} has {} fields, expected 4",
                line + 1,
                record.len()
            )));
        }
        let id = record[0].trim();
        let period = record[1].trim();
        let variable = record[2].trim();
        let period_idx = PERIODS
            .iter()
            .position(|p| *p == period)
            .ok_or_else(|| {
                GxeError::Format(format!(
                    "environment row {} names unknown period {period:?}; \
                     expected one of {PERIODS:?}",
                    line + 1
                ))
            })?;
        let value: f64 = record[3].trim().parse().map_err(|_| {
            GxeError::Format(format!(
                "environment row {} holds a non-numeric value {:?}",
                line + 1,
                &record[3]
            ))
        })?;
        if !value.is_finite() {
            return Err(GxeError::NonFinite(format!(
                "environment row {} holds non-finite value {value}",
                line + 1
            )));
        }
        let env_idx = *id_index.entry(id.to_string()).or_insert_with(|| {
            ids.push(id.to_string());
            ids.len() - 1
        });
        let var_idx = *var_index.entry(variable.to_string()).or_insert_with(|| {
            variables.push(variable.to_string());
            variables.len() - 1
        });
        if cells.insert((env_idx, period_idx, var_idx), value).is_some() {
            return Err(GxeError::Format(format!(
                "duplicate environment cell ({id}, {period}, {variable})"
            )));
        }
    }
    if ids.is_empty() {
        return Err(GxeError::Degenerate("environment table has no rows".into()));
    }
    let mut values = Vec::with_capacity(ids.len());
    for (env_idx, id) in ids.iter().enumerate() {
        let mut m = DMatrix::zeros(PERIODS.len(), variables.len());
        for (period_idx, period) in PERIODS.iter().enumerate() {
            for (var_idx, variable) in variables.iter().enumerate() {
                match cells.get(&(env_idx, period_idx, var_idx)) {
                    Some(&v) => m[(period_idx, var_idx)] = v,
                    None => {
                        return Err(GxeError::Format(format!(
                            "environment {id:?} is missing ({period}, {variable})"
                        )));
                    }
                }
            }
        }
        values.push(m);
    }
    EnvTable::new(ids, variables, values)
}

/// Writes an environment table in the long CSV layout.
pub fn write_env(path: impl AsRef<Path>, table: &EnvTable) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    writer.write_record(["environment_id", "period", "variable", "value"])?;
    for (row, id) in table.ids.iter().enumerate() {
        let m = table.series(row);
        for (period_idx, period) in PERIODS.iter().enumerate() {
            for (var_idx, variable) in table.variables.iter().enumerate() {
                writer.write_record([
                    id.as_str(),
                    period,
                    variable.as_str(),
                    &m[(period_idx, var_idx)].to_string(),
                ])?;
            }
        }
    }
    writer.flush()?;
    Ok(())
}

/// Z-scores every (period, variable) covariate using reference environments.
///
/// Means and standard deviations (n-1 denominator) are estimated on the
/// `reference` environments only and the same affine map is applied to every
/// environment in the table, so held-out environments never influence the
/// scaling. A zero-variance covariate is centered only and reported in the
/// returned warnings.
pub fn normalize_env(table: &EnvTable, reference: &[String]) -> Result<(EnvTable, Vec<String>)> {
    let norm = EnvNormalization::fit(table, reference)?;
    let normalized = norm.apply(table)?;
    Ok((normalized, norm.warnings))
}

/// A fitted per-covariate affine normalization (z-scores against a reference
/// set of environments), reusable on any compatible table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvNormalization {
    /// Covariate names, in the column order of the tables this applies to.
    pub variables: Vec<String>,
    /// Reference means, one per (period, covariate) cell.
    pub mean: DMatrix<f64>,
    /// Reference standard deviations used as divisors (1 where degenerate).
    pub scale: DMatrix<f64>,
    /// Human-readable notes about zero-variance covariates.
    pub warnings: Vec<String>,
}

impl EnvNormalization {
    /// Computes reference statistics over the (deduplicated) reference
    /// environments: sample mean and n−1 standard deviation per cell, with a
    /// unit divisor and a warning wherever the reference variance is zero.
    pub fn fit(table: &EnvTable, reference: &[String]) -> Result<Self> {
        if reference.is_empty() {
            return Err(GxeError::Degenerate(
                "environment normalization needs at least one reference environment".into(),
            ));
        }
        let mut ref_rows = Vec::with_capacity(reference.len());
        for id in reference {
            match table.row(id) {
                Some(row) => ref_rows.push(row),
                None => {
                    return Err(GxeError::UnknownId {
                        kind: "environment",
                        id: id.clone(),
                    });
                }
            }
        }
        ref_rows.sort_unstable();
        ref_rows.dedup();

        let p = table.variables.len();
        let mut warnings = Vec::new();
        let mut mean = DMatrix::zeros(PERIODS.len(), p);
        let mut scale = DMatrix::from_element(PERIODS.len(), p, 1.0);
        for period_idx in 0..PERIODS.len() {
            for var_idx in 0..p {
                let xs: Vec<f64> = ref_rows
                    .iter()
                    .map(|&row| table.values[row][(period_idx, var_idx)])
                    .collect();
                let m = xs.iter().sum::<f64>() / xs.len() as f64;
                let sd = if xs.len() > 1 {
                    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64)
                        .sqrt()
                } else {
                    0.0
                };
                mean[(period_idx, var_idx)] = m;
                if sd > 0.0 {
                    scale[(period_idx, var_idx)] = sd;
                } else {
                    warnings.push(format!(
                        "covariate ({}, {}) has zero variance over the reference \
                         environments; centered without scaling",
                        PERIODS[period_idx], table.variables[var_idx]
                    ));
                }
            }
        }
        Ok(Self {
            variables: table.variables.clone(),
            mean,
            scale,
            warnings,
        })
    }

    /// Applies the fitted affine map to every environment of a table.
    pub fn apply(&self, table: &EnvTable) -> Result<EnvTable> {
        if table.variables != self.variables {
            return Err(GxeError::Format(format!(
                "environment covariates {:?} do not match the normalization's {:?}",
                table.variables, self.variables
            )));
        }
        let out: Vec<DMatrix<f64>> = table
            .values
            .iter()
            .map(|m| {
                let mut z = m.clone();
                for period_idx in 0..PERIODS.len() {
                    for var_idx in 0..self.variables.len() {
                        let v = &mut z[(period_idx, var_idx)];
                        *v = (*v - self.mean[(period_idx, var_idx)])
                            / self.scale[(period_idx, var_idx)];
                    }
                }
                z
            })
            .collect();
        EnvTable::new(table.ids.clone(), table.variables.clone(), out)
    }
}

/// Reads a trials CSV (`variety_id,environment_id,location,year,trait,value`).
pub fn load_trials(path: impl AsRef<Path>) -> Result<Vec<TrialRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())?;
    let header: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header != [
        "variety_id",
        "environment_id",
        "location",
        "year",
        "trait",
        "value",
    ] {
        return Err(GxeError::Format(format!(
            "trials file header must be \
             variety_id,environment_id,location,year,trait,value; found {header:?}"
        )));
    }
    let mut records = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != 6 {
            return Err(GxeError::Format(format!(
                "trials row {} has {} fields, expected 6",
                line + 1,
                record.len()
            )));
        }
        let trait_kind = TraitKind::parse(record[4].trim()).map_err(|_| {
            GxeError::Format(format!(
                "trials row {} names unknown trait {:?}",
                line + 1,
                &record[4]
            ))
        })?;
        let value: f64 = record[5].trim().parse().map_err(|_| {
            GxeError::Format(format!(
                "trials row {} holds a non-numeric value {:?}",
                line + 1,
                &record[5]
            ))
        })?;
        if !value.is_finite() {
            return Err(GxeError::NonFinite(format!(
                "trials row {} holds non-finite value {value}",
                line + 1
            )));
        }
        records.push(TrialRecord {
            variety_id: record[0].trim().to_string(),
            environment_id: record[1].trim().to_string(),
            location: record[2].trim().to_string(),
            year: record[3].trim().to_string(),
            trait_kind,
            value,
        });
    }
    Ok(records)
}

/// Writes trial records in the standard CSV layout.
pub fn write_trials(path: impl AsRef<Path>, records: &[TrialRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    writer.write_record([
        "variety_id",
        "environment_id",
        "location",
        "year",
        "trait",
        "value",
    ])?;
    for r in records {
        writer.write_record([
            r.variety_id.as_str(),
            r.environment_id.as_str(),
            r.location.as_str(),
            r.year.as_str(),
            r.trait_kind.name(),
            &r.value.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// One joined trial observation, resolved against the covariate tables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Row in the genotype table.
    pub variety: usize,
    /// Row in the environment table.
    pub environment: usize,
    /// Measured trait value.
    pub value: f64,
}

/// Counts of what [`assemble_dataset`] kept and dropped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AssemblyReport {
    /// Records joined into the dataset.
    pub kept: usize,
    /// Records dropped because the trials file measures a different trait.
    pub other_trait: usize,
    /// Records dropped because the variety is absent from the genotype table.
    pub unknown_variety: usize,
    /// Records dropped because the environment is absent from the covariate
    /// table.
    pub unknown_environment: usize,
}

/// A joined dataset: observations of one trait plus the covariate tables
/// they resolve against.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Which trait the observations measure.
    pub trait_kind: TraitKind,
    /// SNP sequences of all known varieties.
    pub genotypes: GenotypeTable,
    /// Raw (unnormalized) environment covariates.
    pub env: EnvTable,
    /// Joined observations, in trials-file order.
    pub records: Vec<Observation>,
}

impl Dataset {
    /// Number of observations.
    pub fn len(&self) -> usize {
        self.records.len()
    }

    /// True when the dataset holds no observations (never, by construction).
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Environment ids referenced by the given record indices, first
    /// appearance order, deduplicated.
    pub fn environment_ids_of(&self, records: &[usize]) -> Vec<String> {
        let mut seen = vec![false; self.env.len()];
        let mut out = Vec::new();
        for &r in records {
            let e = self.records[r].environment;
            if !seen[e] {
                seen[e] = true;
                out.push(self.env.ids()[e].clone());
            }
        }
        out
    }
}

/// Joins trial records against the covariate tables, keeping one trait.
///
/// Records measuring the other trait are filtered; records referencing
/// unknown varieties or environments are dropped and counted in the report.
pub fn assemble_dataset(
    records: Vec<TrialRecord>,
    genotypes: GenotypeTable,
    env: EnvTable,
    trait_kind: TraitKind,
) -> Result<(Dataset, AssemblyReport)> {
    let mut report = AssemblyReport::default();
    let mut joined = Vec::new();
    for r in records {
        if r.trait_kind != trait_kind {
            report.other_trait += 1;
            continue;
        }
        let Some(variety) = genotypes.row(&r.variety_id) else {
            report.unknown_variety += 1;
            continue;
        };
        let Some(environment) = env.row(&r.environment_id) else {
            report.unknown_environment += 1;
            continue;
        };
        joined.push(Observation {
            variety,
            environment,
            value: r.value,
        });
    }
    report.kept = joined.len();
    if joined.len() < 2 {
        return Err(GxeError::Degenerate(format!(
            "dataset holds {} joined record(s) for trait {}; need at least 2",
            joined.len(),
            trait_kind
        )));
    }
    Ok((
        Dataset {
            trait_kind,
            genotypes,
            env,
            records: joined,
        },
        report,
    ))
}

/// Loads and joins the three experiment files.
pub fn load_dataset(
    trials: impl AsRef<Path>,
    genotypes: impl AsRef<Path>,
    env: impl AsRef<Path>,
    trait_kind: TraitKind,
) -> Result<(Dataset, AssemblyReport)> {
    let records = load_trials(trials)?;
    let genotypes = load_genotypes(genotypes)?;
    let env = load_env(env)?;
    assemble_dataset(records, genotypes, env, trait_kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::RngExt;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use std::io::Write;
    use tempfile::NamedTempFile;

    fn temp_csv(content: &str) -> NamedTempFile {
        let mut f = NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    pub(crate) fn toy_env_table() -> EnvTable {
        let vars = vec!["rain".to_string(), "temp".to_string()];
        let mk = |base: f64| {
            DMatrix::from_fn(6, 2, |r, c| base + r as f64 + 10.0 * c as f64)
        };
        EnvTable::new(
            vec!["e1".into(), "e2".into(), "e3".into()],
            vars,
            vec![mk(0.0), mk(1.0), mk(5.0)],
        )
        .unwrap()
    }

    #[test]
    fn loads_packed_genotypes() {
        let f = temp_csv("variety_id,sequence\nv1,ACGT\nv2,AC-K\n");
        let table = load_genotypes(f.path()).unwrap();
        assert_eq!(table.len(), 2);
        assert_eq!(table.n_markers(), 4);
        assert_eq!(table.ids(), &["v1".to_string(), "v2".to_string()]);
        assert_eq!(table.sequence(1), b"AC-K");
        assert_eq!(table.row("v2"), Some(1));
        assert_eq!(table.row("v9"), None);
    }

    #[test]
    fn loads_wide_genotypes() {
        let packed = temp_csv("variety_id,sequence\nv1,ACG\nv2,A-T\n");
        let wide = temp_csv("variety_id,m1,m2,m3\nv1,A,C,G\nv2,A,-,T\n");
        let a = load_genotypes(packed.path()).unwrap();
        let b = load_genotypes(wide.path()).unwrap();
        assert_eq!(a.sequence(0), b.sequence(0));
        assert_eq!(a.sequence(1), b.sequence(1));
    }

    #[test]
    fn rejects_unknown_symbol_with_position() {
        let f = temp_csv("variety_id,sequence\nv1,ACXF\n");
        let err = load_genotypes(f.path()).unwrap_err();
        match err {
            GxeError::UnknownSymbol {
                variety,
                position,
                symbol,
            } => {
                assert_eq!(variety, "v1");
                assert_eq!(position, 3);
                assert_eq!(symbol, 'X');
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn rejects_ragged_sequences() {
        let f = temp_csv("variety_id,sequence\nv1,ACGT\nv2,ACG\n");
        let err = load_genotypes(f.path()).unwrap_err();
        match err {
            GxeError::LengthMismatch {
                variety,
                expected,
                found,
            } => {
                assert_eq!(variety, "v2");
                assert_eq!(expected, 4);
                assert_eq!(found, 3);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn rejects_duplicate_and_empty_genotypes() {
        let dup = temp_csv("variety_id,sequence\nv1,AC\nv1,GT\n");
        assert!(matches!(
            load_genotypes(dup.path()).unwrap_err(),
            GxeError::Format(_)
        ));
        let empty = temp_csv("variety_id,sequence\n");
        assert!(matches!(
            load_genotypes(empty.path()).unwrap_err(),
            GxeError::Degenerate(_)
        ));
    }

    #[test]
    fn genotype_round_trip() {
        let table = GenotypeTable::new(
            vec![("v1".into(), "ACGKMRY-".into()), ("v2".into(), "TT-GACGY".into())],
            DEFAULT_MISSING,
        )
        .unwrap();
        let f = NamedTempFile::new().unwrap();
        write_genotypes(f.path(), &table).unwrap();
        let back = load_genotypes(f.path()).unwrap();
        assert_eq!(back, table);
    }

    #[test]
    fn encodes_homozygotes_heterozygotes_and_imputation() {
        // Marker 1: calls A, A, R(=AG) -> major A, dosages 2, 2, 1.
        // Marker 2: calls G, T, - -> tie between G and T, G wins, dosages 2, 0, mean 1.
        let table = GenotypeTable::new(
            vec![
                ("v1".into(), "AG".into()),
                ("v2".into(), "AT".into()),
                ("v3".into(), "R-".into()),
            ],
            DEFAULT_MISSING,
        )
        .unwrap();
        let enc = encode_biallelic(&table).unwrap();
        let d = enc.dosages();
        assert_eq!(d[(0, 0)], 2.0);
        assert_eq!(d[(1, 0)], 2.0);
        assert_eq!(d[(2, 0)], 1.0);
        assert_eq!(d[(0, 1)], 2.0);
        assert_eq!(d[(1, 1)], 0.0);
        assert_relative_eq!(d[(2, 1)], 1.0, max_relative = 1e-15);
    }

    #[test]
    fn imputes_with_the_marker_mean() {
        // Calls A, - at a single marker: dosage 2 and imputed mean 2.
        let table = GenotypeTable::new(
            vec![("v1".into(), "A".into()), ("v2".into(), "-".into())],
            DEFAULT_MISSING,
        )
        .unwrap();
        let enc = encode_biallelic(&table).unwrap();
        assert_eq!(enc.dosages()[(0, 0)], 2.0);
        assert_eq!(enc.dosages()[(1, 0)], 2.0);
    }

    #[test]
    fn rejects_all_missing_marker() {
        let table = GenotypeTable::new(
            vec![("v1".into(), "A-".into()), ("v2".into(), "C-".into())],
            DEFAULT_MISSING,
        )
        .unwrap();
        let err = encode_biallelic(&table).unwrap_err();
        match err {
            GxeError::Degenerate(msg) => assert!(msg.contains("marker 2"), "{msg}"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn dosages_match_a_naive_allele_counter() {
        // Random tables: each dosage equals a per-call recount of major
        // alleles, and entries stay within [0, 2].
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let symbols = b"ACGTKMRY-";
        for _ in 0..20 {
            let n = rng.random_range(2..8);
            let m = rng.random_range(1..12);
            let rows: Vec<(String, String)> = (0..n)
                .map(|i| {
                    let seq: String = (0..m)
                        .map(|_| symbols[rng.random_range(0..symbols.len())] as char)
                        .collect();
                    (format!("v{i}"), seq)
                })
                .collect();
            let table = match GenotypeTable::new(rows, DEFAULT_MISSING) {
                Ok(t) => t,
                Err(_) => continue, // all-missing column safety below
            };
            let enc = match encode_biallelic(&table) {
                Ok(e) => e,
                Err(GxeError::Degenerate(_)) => continue,
                Err(other) => panic!("unexpected error {other:?}"),
            };
            for j in 0..m {
                // Naive recount: allele frequencies, then per-call dosage.
                let mut counts: HashMap<u8, u32> = HashMap::new();
                for i in 0..n {
                    if let Some((a, b)) = allele_pair(table.sequence(i)[j]) {
                        *counts.entry(a).or_insert(0) += 1;
                        *counts.entry(b).or_insert(0) += 1;
                    }
                }
                let best = counts.values().copied().max().unwrap();
                let major = counts
                    .iter()
                    .filter(|(_, &c)| c == best)
                    .map(|(&a, _)| a)
                    .min()
                    .unwrap();
                for i in 0..n {
                    let d = enc.dosages()[(i, j)];
                    assert!((0.0..=2.0).contains(&d));
                    if let Some((a, b)) = allele_pair(table.sequence(i)[j]) {
                        let expect = f64::from((a == major) as u8 + (b == major) as u8);
                        assert_eq!(d, expect, "variety {i} marker {j}");
                    }
                }
            }
        }
    }

    #[test]
    fn encoding_is_permutation_equivariant() {
        let rows = vec![
            ("v1".to_string(), "AKGT".to_string()),
            ("v2".to_string(), "MCG-".to_string()),
            ("v3".to_string(), "RYTT".to_string()),
        ];
        let mut shuffled = rows.clone();
        shuffled.rotate_left(1);
        let a = encode_biallelic(&GenotypeTable::new(rows, DEFAULT_MISSING).unwrap()).unwrap();
        let b =
            encode_biallelic(&GenotypeTable::new(shuffled, DEFAULT_MISSING).unwrap()).unwrap();
        // Row of v2 in both encodings must agree.
        let ia = a.ids().iter().position(|s| s == "v2").unwrap();
        let ib = b.ids().iter().position(|s| s == "v2").unwrap();
        assert_eq!(a.row(ia), b.row(ib));
    }

    #[test]
    fn loads_and_round_trips_env_table() {
        let table = toy_env_table();
        let f = NamedTempFile::new().unwrap();
        write_env(f.path(), &table).unwrap();
        let back = load_env(f.path()).unwrap();
        assert_eq!(back, table);
        assert_eq!(back.variables(), &["rain".to_string(), "temp".to_string()]);
        assert_eq!(back.series(1)[(0, 0)], 1.0);
    }

    #[test]
    fn env_loader_rejects_schema_violations() {
        let bad_period = temp_csv(
            "environment_id,period,variable,value\ne1,spring,rain,1.0\n",
        );
        assert!(matches!(
            load_env(bad_period.path()).unwrap_err(),
            GxeError::Format(_)
        ));

        let mut rows = String::from("environment_id,period,variable,value\n");
        for p in PERIODS {
            rows.push_str(&format!("e1,{p},rain,1.0\n"));
        }
        // e2 lacks the july cell.
        for p in &PERIODS[..5] {
            rows.push_str(&format!("e2,{p},rain,2.0\n"));
        }
        let missing_cell = temp_csv(&rows);
        let err = load_env(missing_cell.path()).unwrap_err();
        match err {
            GxeError::Format(msg) => {
                assert!(msg.contains("e2") && msg.contains("july"), "{msg}");
            }
            other => panic!("unexpected error {other:?}"),
        }

        let dup = temp_csv(
            "environment_id,period,variable,value\ne1,winter,rain,1.0\ne1,winter,rain,2.0\n",
        );
        assert!(matches!(
            load_env(dup.path()).unwrap_err(),
            GxeError::Format(_)
        ));
    }

    #[test]
    fn normalization_is_a_reference_zscore() {
        let table = toy_env_table();
        // Values of (winter, rain) across e1, e2, e3 are 0, 1, 5.
        let refs: Vec<String> = vec!["e1".into(), "e2".into(), "e3".into()];
        let (normalized, warnings) = normalize_env(&table, &refs).unwrap();
        assert!(warnings.is_empty());
        let mean = 2.0_f64;
        let sd = (((0.0 - mean).powi(2) + (1.0 - mean).powi(2) + (5.0 - mean).powi(2)) / 2.0)
            .sqrt();
        for (i, expect) in [(0usize, (0.0 - mean) / sd), (1, (1.0 - mean) / sd)] {
            assert_relative_eq!(normalized.series(i)[(0, 0)], expect, max_relative = 1e-12);
        }
        // Reference columns end up zero-mean, unit-sd.
        let xs: Vec<f64> = (0..3).map(|i| normalized.series(i)[(0, 0)]).collect();
        let m: f64 = xs.iter().sum::<f64>() / 3.0;
        let v: f64 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 2.0;
        assert_relative_eq!(m, 0.0, epsilon = 1e-12);
        assert_relative_eq!(v, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn normalization_uses_only_reference_environments() {
        let table = toy_env_table();
        let refs: Vec<String> = vec!["e1".into(), "e2".into()];
        let (normalized, _) = normalize_env(&table, &refs).unwrap();
        // Stats come from e1, e2 (values 0 and 1): mean 0.5, sd sqrt(0.5).
        let sd = 0.5f64.sqrt();
        assert_relative_eq!(
            normalized.series(2)[(0, 0)],
            (5.0 - 0.5) / sd,
            max_relative = 1e-12
        );
        // The same affine map applies to reference and held-out environments.
        assert_relative_eq!(
            normalized.series(0)[(0, 0)],
            (0.0 - 0.5) / sd,
            max_relative = 1e-12
        );
    }

    #[test]
    fn normalization_warns_on_zero_variance() {
        let vars = vec!["flat".to_string()];
        let m = DMatrix::from_element(6, 1, 3.0);
        let table = EnvTable::new(
            vec!["e1".into(), "e2".into()],
            vars,
            vec![m.clone(), m],
        )
        .unwrap();
        let refs: Vec<String> = vec!["e1".into(), "e2".into()];
        let (normalized, warnings) = normalize_env(&table, &refs).unwrap();
        assert_eq!(warnings.len(), 6); // one per period
        assert!(warnings[0].contains("flat"));
        assert_eq!(normalized.series(0)[(0, 0)], 0.0); // centered only
    }

    #[test]
    fn normalization_is_idempotent_over_the_references() {
        let table = toy_env_table();
        let refs: Vec<String> = vec!["e1".into(), "e2".into(), "e3".into()];
        let (once, _) = normalize_env(&table, &refs).unwrap();
        let (twice, _) = normalize_env(&once, &refs).unwrap();
        for i in 0..table.len() {
            assert_relative_eq!(twice.series(i), once.series(i), epsilon = 1e-12);
        }
    }

    #[test]
    fn loads_trials_and_reports_schema_errors() {
        let f = temp_csv(
            "variety_id,environment_id,location,year,trait,value\n\
             v1,loc1_2015,loc1,2015,yield,61.2\n\
             v2,loc1_2015,loc1,2015,protein,12.9\n",
        );
        let records = load_trials(f.path()).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].trait_kind, TraitKind::Yield);
        assert_eq!(records[1].value, 12.9);

        let bad_trait = temp_csv(
            "variety_id,environment_id,location,year,trait,value\n\
             v1,e1,l,2015,height,1.0\n",
        );
        assert!(matches!(
            load_trials(bad_trait.path()).unwrap_err(),
            GxeError::Format(_)
        ));

        let bad_value = temp_csv(
            "variety_id,environment_id,location,year,trait,value\n\
             v1,e1,l,2015,yield,NaN\n",
        );
        assert!(matches!(
            load_trials(bad_value.path()).unwrap_err(),
            GxeError::NonFinite(_)
        ));

        let bad_header = temp_csv("variety,env,value\nv1,e1,1.0\n");
        assert!(matches!(
            load_trials(bad_header.path()).unwrap_err(),
            GxeError::Format(_)
        ));
    }

    #[test]
    fn assembles_and_counts_drops() {
        let genotypes = GenotypeTable::new(
            vec![("v1".into(), "ACGT".into()), ("v2".into(), "AKGT".into())],
            DEFAULT_MISSING,
        )
        .unwrap();
        let env = toy_env_table();
        let mk = |v: &str, e: &str, t: TraitKind, value: f64| TrialRecord {
            variety_id: v.into(),
            environment_id: e.into(),
            location: "loc".into(),
            year: "2015".into(),
            trait_kind: t,
            value,
        };
        let records = vec![
            mk("v1", "e1", TraitKind::Yield, 50.0),
            mk("v2", "e2", TraitKind::Yield, 55.0),
            mk("v2", "e2", TraitKind::Protein, 12.0), // other trait
            mk("v9", "e1", TraitKind::Yield, 40.0),   // unknown variety
            mk("v1", "e9", TraitKind::Yield, 41.0),   // unknown environment
        ];
        let (dataset, report) =
            assemble_dataset(records, genotypes, env, TraitKind::Yield).unwrap();
        assert_eq!(report.kept, 2);
        assert_eq!(report.other_trait, 1);
        assert_eq!(report.unknown_variety, 1);
        assert_eq!(report.unknown_environment, 1);
        assert_eq!(dataset.len(), 2);
        assert_eq!(dataset.records[1].variety, 1);
        assert_eq!(dataset.records[1].environment, 1);
        assert_eq!(dataset.environment_ids_of(&[0, 1]), vec!["e1", "e2"]);
    }

    #[test]
    fn assembly_rejects_empty_join() {
        let genotypes = GenotypeTable::new(
            vec![("v1".into(), "ACGT".into())],
            DEFAULT_MISSING,
        )
        .unwrap();
        let env = toy_env_table();
        let records = vec![TrialRecord {
            variety_id: "v9".into(),
            environment_id: "e9".into(),
            location: "loc".into(),
            year: "2015".into(),
            trait_kind: TraitKind::Yield,
            value: 1.0,
        }];
        assert!(matches!(
            assemble_dataset(records, genotypes, env, TraitKind::Yield).unwrap_err(),
            GxeError::Degenerate(_)
        ));
    }

    #[test]
    fn trials_round_trip() {
        let records = vec![
            TrialRecord {
                variety_id: "v1".into(),
                environment_id: "l1_2015".into(),
                location: "l1".into(),
                year: "2015".into(),
                trait_kind: TraitKind::Yield,
                value: 61.25,
            },
            TrialRecord {
                variety_id: "v2".into(),
                environment_id: "l2_2016".into(),
                location: "l2".into(),
                year: "2016".into(),
                trait_kind: TraitKind::Protein,
                value: 13.5,
            },
        ];
        let f = NamedTempFile::new().unwrap();
        write_trials(f.path(), &records).unwrap();
        let back = load_trials(f.path()).unwrap();
        assert_eq!(back, records);
    }
}
