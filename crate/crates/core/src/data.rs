//! GAP-format dataset ingestion, gold labels, pronoun gender and
//! gender-stratified fold planning.
//!
//! Offsets in GAP files count Unicode scalar values, not bytes. All offset
//! handling in this crate follows that convention.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::DataError;
use crate::seed;

/// Column names of a GAP TSV header, in order.
pub const GAP_COLUMNS: [&str; 11] =
    ["ID", "Text", "Pronoun", "Pronoun-offset", "A", "A-offset", "A-coref", "B", "B-offset", "B-coref", "URL"];

/// One row of a GAP file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GapRecord {
    pub id: String,
    pub text: String,
    pub pronoun: String,
    pub pronoun_offset: usize,
    pub a_name: String,
    pub a_offset: usize,
    pub a_coref: bool,
    pub b_name: String,
    pub b_offset: usize,
    pub b_coref: bool,
    pub url: String,
}

/// Gold antecedent class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    A,
    B,
    N,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::A, Label::B, Label::N];

    pub fn index(self) -> usize {
        match self {
            Label::A => 0,
            Label::B => 1,
            Label::N => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }

    /// The pair of binary coreference decisions this label stands for.
    pub fn as_flags(self) -> (bool, bool) {
        match self {
            Label::A => (true, false),
            Label::B => (false, true),
            Label::N => (false, false),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Label::A => "A",
            Label::B => "B",
            Label::N => "N",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub fn swapped(self) -> Gender {
        match self {
            Gender::Male => Gender::Female,
            Gender::Female => Gender::Male,
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Gender::Male => f.write_str("male"),
            Gender::Female => f.write_str("female"),
        }
    }
}

/// Label counts over a dataset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DatasetStats {
    pub total: usize,
    pub a_count: usize,
    pub b_count: usize,
    pub n_count: usize,
}

/// Assignment of record ids to folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    k: usize,
    assignments: BTreeMap<String, usize>,
}

impl FoldPlan {
    /// Degenerate single-fold plan: the one model trains on every record.
    pub fn single<'a, I: IntoIterator<Item = &'a GapRecord>>(records: I) -> FoldPlan {
        FoldPlan { k: 1, assignments: records.into_iter().map(|r| (r.id.clone(), 0)).collect() }
    }

    pub fn from_assignments(k: usize, assignments: BTreeMap<String, usize>) -> Result<FoldPlan, DataError> {
        if k == 0 {
            return Err(DataError::InvalidFoldCount(k));
        }
        if let Some((id, &fold)) = assignments.iter().find(|(_, &f)| f >= k) {
            return Err(DataError::FoldOutOfRange { id: id.clone(), fold, k });
        }
        Ok(FoldPlan { k, assignments })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn assignments(&self) -> &BTreeMap<String, usize> {
        &self.assignments
    }

    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignments.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    /// Whether `id` belongs to the training split of `fold`. A single-fold
    /// plan trains on everything.
    pub fn is_training(&self, id: &str, fold: usize) -> bool {
        match self.fold_of(id) {
            Some(f) => self.k == 1 || f != fold,
            None => false,
        }
    }

    /// Whether `id` is held out by `fold`. Nothing is held out in a
    /// single-fold plan.
    pub fn is_held_out(&self, id: &str, fold: usize) -> bool {
        self.k > 1 && self.fold_of(id) == Some(fold)
    }
}

/// Parse GAP TSV content. Accepts LF or CRLF line endings and an optional
/// UTF-8 byte-order mark.
pub fn parse_gap_tsv(bytes: &[u8]) -> Result<Vec<GapRecord>, DataError> {
    let content = std::str::from_utf8(bytes).map_err(|e| DataError::Utf8(e.to_string()))?;
    let content = content.strip_prefix('\u{feff}').unwrap_or(content);
    let mut lines = content.split('\n').map(|l| l.strip_suffix('\r').unwrap_or(l));

    let header = lines.next().unwrap_or("");
    let cols: Vec<&str> = header.split('\t').collect();
    if cols != GAP_COLUMNS {
        return Err(DataError::BadHeader(header.to_string()));
    }

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 2;
        let record = parse_row(line, line_no)?;
        if !seen.insert(record.id.clone()) {
            return Err(DataError::DuplicateId(record.id));
        }
        records.push(record);
    }
    Ok(records)
}

fn parse_row(line: &str, line_no: usize) -> Result<GapRecord, DataError> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != GAP_COLUMNS.len() {
        return Err(DataError::MalformedRow {
            line: line_no,
            reason: format!("expected {} columns, found {}", GAP_COLUMNS.len(), fields.len()),
        });
    }
    let offset = |col: usize| -> Result<usize, DataError> {
        fields[col].trim().parse::<usize>().map_err(|_| DataError::MalformedRow {
            line: line_no,
            reason: format!("{} is not an offset: {:?}", GAP_COLUMNS[col], fields[col]),
        })
    };
    let flag = |col: usize| -> Result<bool, DataError> {
        match fields[col].trim().to_ascii_lowercase().as_str() {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(DataError::MalformedRow {
                line: line_no,
                reason: format!("{} is not TRUE/FALSE: {:?}", GAP_COLUMNS[col], fields[col]),
            }),
        }
    };

    let record = GapRecord {
        id: fields[0].to_string(),
        text: fields[1].to_string(),
        pronoun: fields[2].to_string(),
        pronoun_offset: offset(3)?,
        a_name: fields[4].to_string(),
        a_offset: offset(5)?,
        a_coref: flag(6)?,
        b_name: fields[7].to_string(),
        b_offset: offset(8)?,
        b_coref: flag(9)?,
        url: fields[10].to_string(),
    };
    validate_record(&record)?;
    Ok(record)
}

/// Check the surface-form and flag invariants of a record.
pub fn validate_record(record: &GapRecord) -> Result<(), DataError> {
    if record.a_coref && record.b_coref {
        return Err(DataError::BothCorefTrue(record.id.clone()));
    }
    let len = record.text.chars().count();
    for (field, surface, offset) in [
        ("Pronoun", &record.pronoun, record.pronoun_offset),
        ("A", &record.a_name, record.a_offset),
        ("B", &record.b_name, record.b_offset),
    ] {
        let found = char_slice(&record.text, offset, surface.chars().count());
        if offset >= len || found != Some(surface.as_str()) {
            return Err(DataError::OffsetMismatch { id: record.id.clone(), field, offset, expected: surface.clone() });
        }
    }
    Ok(())
}

/// Substring of `text` covering `len` characters from character `start`.
pub fn char_slice(text: &str, start: usize, len: usize) -> Option<&str> {
    let begin = char_to_byte(text, start)?;
    let end = char_to_byte(text, start + len)?;
    Some(&text[begin..end])
}

/// Byte index of character `idx`; `idx == char count` maps to `text.len()`.
pub fn char_to_byte(text: &str, idx: usize) -> Option<usize> {
    text.char_indices().map(|(b, _)| b).chain(std::iter::once(text.len())).nth(idx)
}

pub fn gold_label(record: &GapRecord) -> Result<Label, DataError> {
    match (record.a_coref, record.b_coref) {
        (true, true) => Err(DataError::BothCorefTrue(record.id.clone())),
        (true, false) => Ok(Label::A),
        (false, true) => Ok(Label::B),
        (false, false) => Ok(Label::N),
    }
}

/// Gender of a pronoun surface form, case-insensitive.
pub fn gender_of_pronoun(pronoun: &str) -> Option<Gender> {
    match pronoun.to_lowercase().as_str() {
        "he" | "him" | "his" => Some(Gender::Male),
        "she" | "her" | "hers" => Some(Gender::Female),
        _ => None,
    }
}

pub fn pronoun_gender(record: &GapRecord) -> Result<Gender, DataError> {
    gender_of_pronoun(&record.pronoun)
        .ok_or_else(|| DataError::UnknownPronoun { id: record.id.clone(), pronoun: record.pronoun.clone() })
}

pub fn dataset_stats(records: &[GapRecord]) -> Result<DatasetStats, DataError> {
    let mut stats = DatasetStats::default();
    for r in records {
        stats.total += 1;
        match gold_label(r)? {
            Label::A => stats.a_count += 1,
            Label::B => stats.b_count += 1,
            Label::N => stats.n_count += 1,
        }
    }
    Ok(stats)
}

/// Partition records into `k` folds stratified on pronoun gender.
///
/// Each gender bucket is shuffled with a seeded generator and dealt
/// round-robin. The female deal starts where the male deal stopped so fold
/// totals also stay within one record of each other.
pub fn stratified_folds(records: &[GapRecord], k: usize, seed_value: u64) -> Result<FoldPlan, DataError> {
    if k < 2 {
        return Err(DataError::InvalidFoldCount(k));
    }
    let mut male = Vec::new();
    let mut female = Vec::new();
    for r in records {
        match pronoun_gender(r)? {
            Gender::Male => male.push(r.id.as_str()),
            Gender::Female => female.push(r.id.as_str()),
        }
    }
    for (gender, bucket) in [(Gender::Male, &male), (Gender::Female, &female)] {
        if bucket.len() < k {
            return Err(DataError::TooFewRecords { gender, have: bucket.len(), k });
        }
    }

    let mut rng: ChaCha8Rng = seed::rng(seed_value, "folds");
    male.shuffle(&mut rng);
    female.shuffle(&mut rng);

    let mut assignments = BTreeMap::new();
    for (i, id) in male.iter().enumerate() {
        if assignments.insert(id.to_string(), i % k).is_some() {
            return Err(DataError::DuplicateId(id.to_string()));
        }
    }
    let start = male.len() % k;
    for (i, id) in female.iter().enumerate() {
        if assignments.insert(id.to_string(), (start + i) % k).is_some() {
            return Err(DataError::DuplicateId(id.to_string()));
        }
    }
    Ok(FoldPlan { k, assignments })
}

/// Serialize a record back to a GAP TSV row (no trailing newline).
pub fn to_tsv_row(r: &GapRecord) -> String {
    let flag = |b: bool| if b { "TRUE" } else { "FALSE" };
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        r.id,
        r.text,
        r.pronoun,
        r.pronoun_offset,
        r.a_name,
        r.a_offset,
        flag(r.a_coref),
        r.b_name,
        r.b_offset,
        flag(r.b_coref),
        r.url
    )
}

/// Serialize records as a complete GAP TSV document.
pub fn write_gap_tsv(records: &[GapRecord]) -> String {
    let mut out = GAP_COLUMNS.join("\t");
    out.push('\n');
    for r in records {
        out.push_str(&to_tsv_row(r));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = "ID\tText\tPronoun\tPronoun-offset\tA\tA-offset\tA-coref\tB\tB-offset\tB-coref\tURL\n\
t-1\tJohn met Carol and he smiled.\the\t19\tJohn\t0\tTRUE\tCarol\t9\tFALSE\thttp://x/1\n\
t-2\tJohn met Carol and she smiled.\tshe\t19\tJohn\t0\tfalse\tCarol\t9\ttrue\thttp://x/2\n\
t-3\tJohn met Carol; Ann said her cat ran.\ther\t25\tJohn\t0\tFALSE\tCarol\t9\tFALSE\thttp://x/3\n";

    #[test]
    fn parses_hand_fixture() {
        let recs = parse_gap_tsv(FIXTURE.as_bytes()).unwrap();
        let labels: Vec<Label> = recs.iter().map(|r| gold_label(r).unwrap()).collect();
        assert_eq!(labels, vec![Label::A, Label::B, Label::N]);
        assert_eq!(dataset_stats(&recs).unwrap(), DatasetStats { total: 3, a_count: 1, b_count: 1, n_count: 1 });
    }

    #[test]
    fn header_only_is_empty() {
        let header = format!("{}\n", GAP_COLUMNS.join("\t"));
        assert!(parse_gap_tsv(header.as_bytes()).unwrap().is_empty());
        assert_eq!(dataset_stats(&[]).unwrap(), DatasetStats::default());
    }

    #[test]
    fn crlf_is_accepted() {
        let crlf = FIXTURE.replace('\n', "\r\n");
        assert_eq!(parse_gap_tsv(crlf.as_bytes()).unwrap().len(), 3);
    }

    #[test]
    fn error_paths() {
        let header = GAP_COLUMNS.join("\t");
        let short = format!("{header}\nx\ty\n");
        assert!(matches!(parse_gap_tsv(short.as_bytes()), Err(DataError::MalformedRow { .. })));

        let bad_flag = format!("{header}\nt\tJohn he\the\t5\tJohn\t0\tyes\tJohn\t0\tFALSE\tu\n");
        assert!(matches!(parse_gap_tsv(bad_flag.as_bytes()), Err(DataError::MalformedRow { .. })));

        let both = format!("{header}\nt\tJohn he\the\t5\tJohn\t0\tTRUE\tJohn\t0\tTRUE\tu\n");
        assert!(matches!(parse_gap_tsv(both.as_bytes()), Err(DataError::BothCorefTrue(_))));

        let shifted = format!("{header}\nt\tJohn he\the\t4\tJohn\t0\tTRUE\tJohn\t0\tFALSE\tu\n");
        assert!(matches!(parse_gap_tsv(shifted.as_bytes()), Err(DataError::OffsetMismatch { .. })));
    }

    #[test]
    fn offsets_count_characters_not_bytes() {
        let header = GAP_COLUMNS.join("\t");
        // "Zoë" has a two-byte character before the pronoun.
        let row = format!("{header}\nt\tZoë said she left.\tshe\t9\tZoë\t0\tTRUE\tZoë\t0\tFALSE\tu\n");
        let recs = parse_gap_tsv(row.as_bytes()).unwrap();
        assert_eq!(char_slice(&recs[0].text, 9, 3), Some("she"));
    }

    #[test]
    fn gold_label_and_gender() {
        let mut r = parse_gap_tsv(FIXTURE.as_bytes()).unwrap().remove(0);
        assert_eq!(gold_label(&r).unwrap(), Label::A);
        r.pronoun = "his".into();
        assert_eq!(pronoun_gender(&r).unwrap(), Gender::Male);
        r.pronoun = "Her".into();
        assert_eq!(pronoun_gender(&r).unwrap(), Gender::Female);
        r.pronoun = "they".into();
        assert!(matches!(pronoun_gender(&r), Err(DataError::UnknownPronoun { .. })));
        r.a_coref = false;
        assert_eq!(gold_label(&r).unwrap(), Label::N);
        r.a_coref = true;
        r.b_coref = true;
        assert!(matches!(gold_label(&r), Err(DataError::BothCorefTrue(_))));
    }

    fn gendered(n_male: usize, n_female: usize) -> Vec<GapRecord> {
        (0..n_male + n_female)
            .map(|i| {
                let pronoun = if i < n_male { "he" } else { "she" };
                let text = format!("Al and Bo saw {pronoun}.");
                GapRecord {
                    id: format!("r{i}"),
                    pronoun: pronoun.into(),
                    pronoun_offset: 14,
                    a_name: "Al".into(),
                    a_offset: 0,
                    a_coref: i % 2 == 0,
                    b_name: "Bo".into(),
                    b_offset: 7,
                    b_coref: false,
                    url: String::new(),
                    text,
                }
            })
            .collect()
    }

    #[test]
    fn perfectly_divisible_folds() {
        let recs = gendered(5, 5);
        let plan = stratified_folds(&recs, 5, 7).unwrap();
        for f in 0..5 {
            let (m, w): (Vec<_>, Vec<_>) =
                recs.iter().filter(|r| plan.fold_of(&r.id) == Some(f)).partition(|r| r.pronoun == "he");
            assert_eq!((m.len(), w.len()), (1, 1));
        }
        assert_eq!(plan, stratified_folds(&recs, 5, 7).unwrap());
        assert_ne!(plan, stratified_folds(&recs, 5, 8).unwrap());
    }

    #[test]
    fn too_few_records_per_gender() {
        let recs = gendered(4, 6);
        assert!(matches!(
            stratified_folds(&recs, 5, 0),
            Err(DataError::TooFewRecords { gender: Gender::Male, have: 4, k: 5 })
        ));
        assert!(matches!(stratified_folds(&recs, 1, 0), Err(DataError::InvalidFoldCount(1))));
    }

    #[test]
    fn stage1_dev_sized_split() {
        // 2454 records, gender balanced as in the five-fold dev pool.
        let recs = gendered(1227, 1227);
        let plan = stratified_folds(&recs, 5, 42).unwrap();
        let mut sizes = [0usize; 5];
        for f in plan.assignments().values() {
            sizes[*f] += 1;
        }
        for s in sizes {
            let train_frac = (2454 - s) as f64 / 2454.0;
            assert!((train_frac - 0.8).abs() < 0.001, "{train_frac}");
        }
    }

    #[test]
    fn single_plan_trains_on_everything() {
        let recs = gendered(2, 2);
        let plan = FoldPlan::single(&recs);
        assert!(recs.iter().all(|r| plan.is_training(&r.id, 0)));
        assert!(recs.iter().all(|r| !plan.is_held_out(&r.id, 0)));
    }

    #[test]
    fn tsv_writer_round_trips() {
        let recs = parse_gap_tsv(FIXTURE.as_bytes()).unwrap();
        assert_eq!(parse_gap_tsv(write_gap_tsv(&recs).as_bytes()).unwrap(), recs);
    }
}
