//! Object-hallucination metrics: CHAIR and Cover over captions, POPE-style
//! yes/no probing, and paired-run comparison.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Splits text into lowercase alphanumeric words with their char spans.
fn words(text: &str) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut start = 0;
    let mut idx = 0;
    for (i, ch) in text.chars().enumerate() {
        idx = i + 1;
        if ch.is_alphanumeric() {
            if current.is_empty() {
                start = i;
            }
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            out.push((core::mem::take(&mut current), start, i));
        }
    }
    if !current.is_empty() {
        out.push((current, start, idx));
    }
    out
}

fn normalize_form(form: &str) -> String {
    let w: Vec<String> = words(form).into_iter().map(|(w, _, _)| w).collect();
    w.join(" ")
}

/// Object categories and the surface forms that name them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Lexicon {
    categories: BTreeSet<String>,
    synonyms: BTreeMap<String, String>,
    longest_form: usize,
}

impl Lexicon {
    /// Builds a lexicon from `category -> surface forms`. Every category also
    /// names itself. Forms are lowercased and split on non-alphanumerics, so
    /// `hot_dog` and `Hot Dog` are the same form.
    pub fn new<I, C, F, S>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (C, F)>,
        C: AsRef<str>,
        F: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut lex = Lexicon::default();
        for (category, forms) in entries {
            let category = String::from(category.as_ref());
            if category.is_empty() {
                return Err(Error::Data("empty category name".into()));
            }
            lex.categories.insert(category.clone());
            lex.add_form(&category, &category)?;
            for form in forms {
                lex.add_form(form.as_ref(), &category)?;
            }
        }
        Ok(lex)
    }

    fn add_form(&mut self, form: &str, category: &str) -> Result<()> {
        let key = normalize_form(form);
        if key.is_empty() {
            return Err(Error::Data(format!(
                "surface form {form:?} of {category} has no words"
            )));
        }
        match self.synonyms.get(&key) {
            Some(existing) if existing != category => Err(Error::Data(format!(
                "surface form {key:?} maps to both {existing} and {category}"
            ))),
            Some(_) => Ok(()),
            None => {
                self.longest_form = self.longest_form.max(key.split(' ').count());
                self.synonyms.insert(key, String::from(category));
                Ok(())
            }
        }
    }

    pub fn categories(&self) -> &BTreeSet<String> {
        &self.categories
    }

    pub fn category_of(&self, form: &str) -> Option<&str> {
        self.synonyms.get(&normalize_form(form)).map(String::as_str)
    }

    fn lookup(&self, words: &[(String, usize, usize)]) -> Option<(&str, String)> {
        let (last, head) = words.split_last()?;
        let prefix: Vec<&str> = head.iter().map(|(w, _, _)| w.as_str()).collect();
        let candidates = [
            Some(last.0.as_str()),
            last.0.strip_suffix("es"),
            last.0.strip_suffix('s'),
        ];
        for cand in candidates.into_iter().flatten() {
            if cand.is_empty() {
                continue;
            }
            let mut key = prefix.join(" ");
            if !key.is_empty() {
                key.push(' ');
            }
            key.push_str(cand);
            if let Some(cat) = self.synonyms.get(&key) {
                return Some((cat.as_str(), key));
            }
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectMatch {
    /// Matched words, lowercased, as they appear in the text.
    pub surface: String,
    pub category: String,
    /// Char offsets `[start, end)` in the original text.
    pub span: (usize, usize),
}

/// Scans `text` left to right, longest surface form first, folding a
/// trailing "es" or "s" on the last word. Matches never overlap.
pub fn extract_objects(text: &str, lexicon: &Lexicon) -> Vec<ObjectMatch> {
    let ws = words(text);
    let mut out = Vec::new();
    let mut i = 0;
    while i < ws.len() {
        let max_len = lexicon.longest_form.min(ws.len() - i);
        let mut matched = false;
        for len in (1..=max_len).rev() {
            let window = &ws[i..i + len];
            if let Some((category, _)) = lexicon.lookup(window) {
                let surface: Vec<&str> = window.iter().map(|(w, _, _)| w.as_str()).collect();
                out.push(ObjectMatch {
                    surface: surface.join(" "),
                    category: String::from(category),
                    span: (window[0].1, window[len - 1].2),
                });
                i += len;
                matched = true;
                break;
            }
        }
        if !matched {
            i += 1;
        }
    }
    out
}

/// Renders matches back to text, one surface form per match.
pub fn render_matches(matches: &[ObjectMatch]) -> String {
    let forms: Vec<&str> = matches.iter().map(|m| m.surface.as_str()).collect();
    forms.join(", ")
}

/// Ground-truth categories per image id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnnotationSet(pub BTreeMap<String, BTreeSet<String>>);

impl AnnotationSet {
    pub fn get(&self, image_id: &str) -> Option<&BTreeSet<String>> {
        self.0.get(image_id)
    }

    /// Checks that every annotated category exists in the lexicon.
    pub fn validate(&self, lexicon: &Lexicon) -> Result<()> {
        for (image, cats) in &self.0 {
            if let Some(c) = cats.iter().find(|c| !lexicon.categories.contains(*c)) {
                return Err(Error::Data(format!(
                    "image {image} annotated with unknown category {c:?}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub text: String,
    pub extracted: Vec<ObjectMatch>,
}

impl CaptionRecord {
    pub fn new(image_id: impl Into<String>, text: impl Into<String>, lexicon: &Lexicon) -> Self {
        let text = text.into();
        let extracted = extract_objects(&text, lexicon);
        Self {
            image_id: image_id.into(),
            text,
            extracted,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountMode {
    /// Each category counted once per caption.
    #[default]
    Unique,
    /// Every mention counted.
    Mentions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChairReport {
    pub mode: CountMode,
    /// Cover is pooled over the corpus (total correct / total annotated).
    pub cover_aggregation: String,
    pub chair_i: f64,
    pub chair_s: f64,
    pub cover: f64,
    pub hallucinated_objects: u64,
    pub generated_objects: u64,
    pub hallucinated_captions: u64,
    pub captions: u64,
    pub mentioned_correct: u64,
    pub annotated: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn chair(
    captions: &[CaptionRecord],
    annotations: &AnnotationSet,
    mode: CountMode,
) -> Result<ChairReport> {
    let (mut hallucinated, mut generated, mut bad_captions) = (0u64, 0u64, 0u64);
    let (mut correct, mut annotated) = (0u64, 0u64);
    for cap in captions {
        let truth = annotations
            .get(&cap.image_id)
            .ok_or_else(|| Error::Data(format!("no annotation for image {}", cap.image_id)))?;
        let mentioned: Vec<&str> = match mode {
            CountMode::Mentions => cap.extracted.iter().map(|m| m.category.as_str()).collect(),
            CountMode::Unique => {
                let set: BTreeSet<&str> =
                    cap.extracted.iter().map(|m| m.category.as_str()).collect();
                set.into_iter().collect()
            }
        };
        let wrong = mentioned.iter().filter(|c| !truth.contains(**c)).count() as u64;
        generated += mentioned.len() as u64;
        hallucinated += wrong;
        if wrong > 0 {
            bad_captions += 1;
        }
        let unique: BTreeSet<&str> = cap.extracted.iter().map(|m| m.category.as_str()).collect();
        correct += unique.iter().filter(|c| truth.contains(**c)).count() as u64;
        annotated += truth.len() as u64;
    }
    Ok(ChairReport {
        mode,
        cover_aggregation: String::from("micro"),
        chair_i: ratio(hallucinated, generated),
        chair_s: ratio(bad_captions, captions.len() as u64),
        cover: ratio(correct, annotated),
        hallucinated_objects: hallucinated,
        generated_objects: generated,
        hallucinated_captions: bad_captions,
        captions: captions.len() as u64,
        mentioned_correct: correct,
        annotated,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PopeSplit {
    Random,
    Popular,
    Adversarial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeAnswer {
    pub question_id: String,
    pub split: PopeSplit,
    pub gold: bool,
    pub response: String,
}

/// How a free-text response becomes yes / no.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseRule {
    /// First alphabetic word, case-insensitive.
    #[default]
    FirstWord,
}

impl ParseRule {
    pub fn parse(self, text: &str) -> Option<bool> {
        match self {
            ParseRule::FirstWord => {
                let word: String = text
                    .chars()
                    .skip_while(|c| !c.is_alphabetic())
                    .take_while(|c| c.is_alphabetic())
                    .flat_map(char::to_lowercase)
                    .collect();
                match word.as_str() {
                    "yes" => Some(true),
                    "no" => Some(false),
                    _ => None,
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PopeStats {
    pub total: u64,
    pub parsed: u64,
    pub correct: u64,
    pub answered_yes: u64,
    pub true_positive: u64,
    pub gold_yes: u64,
    pub accuracy: f64,
    /// Yes answers over parsed answers.
    pub yes_rate: f64,
    pub precision: f64,
    pub recall: f64,
}

impl PopeStats {
    fn add(&mut self, gold: bool, answer: Option<bool>) {
        self.total += 1;
        if gold {
            self.gold_yes += 1;
        }
        if let Some(a) = answer {
            self.parsed += 1;
            if a {
                self.answered_yes += 1;
            }
            if a == gold {
                self.correct += 1;
            }
            if a && gold {
                self.true_positive += 1;
            }
        }
    }

    fn finish(&mut self) {
        self.accuracy = ratio(self.correct, self.total);
        self.yes_rate = ratio(self.answered_yes, self.parsed);
        self.precision = ratio(self.true_positive, self.answered_yes);
        self.recall = ratio(self.true_positive, self.gold_yes);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeReport {
    pub parse_rule: ParseRule,
    pub overall: PopeStats,
    pub splits: BTreeMap<PopeSplit, PopeStats>,
}

/// Scores yes/no answers. Unparsed answers count as wrong and are left out
/// of the yes-rate denominator.
pub fn pope_score(answers: &[PopeAnswer], rule: ParseRule) -> PopeReport {
    let mut overall = PopeStats::default();
    let mut splits: BTreeMap<PopeSplit, PopeStats> = BTreeMap::new();
    for a in answers {
        let parsed = rule.parse(&a.response);
        overall.add(a.gold, parsed);
        splits.entry(a.split).or_default().add(a.gold, parsed);
    }
    overall.finish();
    splits.values_mut().for_each(PopeStats::finish);
    PopeReport {
        parse_rule: rule,
        overall,
        splits,
    }
}

/// Outcome table for the same captions under two decoders, as fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunComparison {
    pub both_correct: f64,
    pub base_correct_only: f64,
    pub treated_correct_only: f64,
    pub both_incorrect: f64,
    pub items: u64,
}

/// Compares per-caption hallucination flags (`true` = hallucinated).
pub fn compare_runs(
    base: &BTreeMap<String, bool>,
    treated: &BTreeMap<String, bool>,
) -> Result<RunComparison> {
    if base.len() != treated.len() || base.keys().any(|k| !treated.contains_key(k)) {
        let missing = base
            .keys()
            .find(|k| !treated.contains_key(*k))
            .or_else(|| treated.keys().find(|k| !base.contains_key(*k)));
        return Err(Error::Data(format!(
            "runs cover different captions (first mismatch: {})",
            missing.map_or("?", String::as_str)
        )));
    }
    if base.is_empty() {
        return Err(Error::Data("no captions to compare".into()));
    }
    let mut counts = [0u64; 4];
    for (key, &b) in base {
        let t = treated[key];
        let idx = match (b, t) {
            (false, false) => 0,
            (false, true) => 1,
            (true, false) => 2,
            (true, true) => 3,
        };
        counts[idx] += 1;
    }
    let n = base.len() as u64;
    Ok(RunComparison {
        both_correct: ratio(counts[0], n),
        base_correct_only: ratio(counts[1], n),
        treated_correct_only: ratio(counts[2], n),
        both_incorrect: ratio(counts[3], n),
        items: n,
    })
}

/// Per-caption hallucination flags keyed by `"{image_id}#{index}"`.
pub fn hallucination_flags(
    captions: &[CaptionRecord],
    annotations: &AnnotationSet,
) -> Result<BTreeMap<String, bool>> {
    captions
        .iter()
        .enumerate()
        .map(|(i, cap)| {
            let truth = annotations
                .get(&cap.image_id)
                .ok_or_else(|| Error::Data(format!("no annotation for image {}", cap.image_id)))?;
            let bad = cap.extracted.iter().any(|m| !truth.contains(&m.category));
            Ok((format!("{}#{i}", cap.image_id), bad))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn lex(entries: &[(&str, &[&str])]) -> Lexicon {
        Lexicon::new(entries.iter().map(|(c, f)| (*c, f.iter().copied()))).unwrap()
    }

    fn annotations(entries: &[(&str, &[&str])]) -> AnnotationSet {
        AnnotationSet(
            entries
                .iter()
                .map(|(id, cats)| {
                    (
                        String::from(*id),
                        cats.iter().map(|c| String::from(*c)).collect(),
                    )
                })
                .collect(),
        )
    }

    #[test]
    fn plural_fold() {
        let l = lex(&[("dog", &[])]);
        let m = extract_objects("A dog chases dogs.", &l);
        assert_eq!(m.len(), 2);
        assert!(m.iter().all(|x| x.category == "dog"));
        assert_eq!(m[0].span, (2, 5));
        assert_eq!(m[1].span, (13, 17));
        let l = lex(&[("box", &[]), ("horse", &[])]);
        let cats: Vec<_> = extract_objects("Boxes and horses", &l)
            .into_iter()
            .map(|m| m.category)
            .collect();
        assert_eq!(cats, vec!["box", "horse"]);
    }

    #[test]
    fn longest_match_first() {
        let l = lex(&[("hot_dog", &["hot dog"]), ("dog", &[]), ("table", &[])]);
        let m = extract_objects("hot dog on a table", &l);
        let cats: Vec<_> = m.iter().map(|x| x.category.as_str()).collect();
        assert_eq!(cats, vec!["hot_dog", "table"]);
        assert_eq!(m[0].span, (0, 7));
    }

    #[test]
    fn empty_text_has_no_matches() {
        assert!(extract_objects("", &lex(&[("dog", &[])])).is_empty());
    }

    #[test]
    fn lexicon_rejects_conflicting_forms() {
        let err = Lexicon::new([("car", vec!["auto"]), ("truck", vec!["Auto"])]).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(Lexicon::new([("car", vec!["!!"])]).is_err());
    }

    #[test]
    fn chair_hand_count() {
        let l = lex(&[("dog", &[]), ("frisbee", &[]), ("cat", &["kitten"])]);
        let ann = annotations(&[("a", &["dog"]), ("b", &["cat"])]);
        let caps = [
            CaptionRecord::new("a", "A dog catches a frisbee.", &l),
            CaptionRecord::new("b", "A kitten sleeping.", &l),
        ];
        let r = chair(&caps, &ann, CountMode::Unique).unwrap();
        assert_eq!((r.generated_objects, r.hallucinated_objects), (3, 1));
        assert_eq!(r.chair_i, 1.0 / 3.0);
        assert_eq!(r.chair_s, 0.5);
        assert_eq!(r.cover, 1.0);
    }

    #[test]
    fn chair_modes_differ_on_repeats() {
        let l = lex(&[("dog", &[]), ("cat", &[])]);
        let ann = annotations(&[("a", &["dog"])]);
        let caps = [CaptionRecord::new("a", "dog, cat, cat and another cat", &l)];
        let u = chair(&caps, &ann, CountMode::Unique).unwrap();
        let m = chair(&caps, &ann, CountMode::Mentions).unwrap();
        assert_eq!((u.hallucinated_objects, u.generated_objects), (1, 2));
        assert_eq!((m.hallucinated_objects, m.generated_objects), (3, 4));
    }

    #[test]
    fn chair_missing_annotation() {
        let l = lex(&[("dog", &[])]);
        let caps = [CaptionRecord::new("zzz", "dog", &l)];
        match chair(&caps, &AnnotationSet::default(), CountMode::Unique) {
            Err(Error::Data(msg)) => assert!(msg.contains("zzz")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn chair_empty_corpus() {
        let r = chair(&[], &AnnotationSet::default(), CountMode::Unique).unwrap();
        assert_eq!(
            (r.chair_i, r.chair_s, r.cover, r.captions),
            (0.0, 0.0, 0.0, 0)
        );
    }

    fn answer(id: &str, gold: bool, text: &str) -> PopeAnswer {
        PopeAnswer {
            question_id: id.into(),
            split: PopeSplit::Random,
            gold,
            response: text.into(),
        }
    }

    #[test]
    fn pope_hand_count() {
        let answers = [
            answer("1", true, "Yes, there is."),
            answer("2", false, "yes"),
            answer("3", false, "No."),
            answer("4", true, "YES"),
        ];
        let r = pope_score(&answers, ParseRule::FirstWord);
        assert_eq!(r.overall.accuracy, 0.75);
        assert_eq!(r.overall.yes_rate, 0.75);
        assert_eq!(r.overall.precision, 2.0 / 3.0);
        assert_eq!(r.overall.recall, 1.0);
        assert_eq!(r.splits[&PopeSplit::Random].total, 4);
    }

    #[test]
    fn pope_unparsed_answers() {
        let answers = [answer("1", true, "Yes."), answer("2", true, "Maybe so")];
        let r = pope_score(&answers, ParseRule::FirstWord);
        assert_eq!(r.overall.accuracy, 0.5);
        assert_eq!(r.overall.parsed, 1);
        assert_eq!(r.overall.yes_rate, 1.0);
        assert_eq!(
            ParseRule::FirstWord.parse("  \"No\", it isn't"),
            Some(false)
        );
        assert_eq!(ParseRule::FirstWord.parse("Nope"), None);
    }

    fn flags(v: &[bool]) -> BTreeMap<String, bool> {
        v.iter()
            .enumerate()
            .map(|(i, &b)| (format!("c{i}"), b))
            .collect()
    }

    #[test]
    fn compare_hand_count() {
        let r = compare_runs(
            &flags(&[false, true, true, false]),
            &flags(&[false, false, true, false]),
        )
        .unwrap();
        assert_eq!(
            (
                r.both_correct,
                r.base_correct_only,
                r.treated_correct_only,
                r.both_incorrect
            ),
            (0.5, 0.0, 0.25, 0.25)
        );
        let same = flags(&[true, false, false]);
        let r = compare_runs(&same, &same).unwrap();
        assert_eq!((r.base_correct_only, r.treated_correct_only), (0.0, 0.0));
    }

    #[test]
    fn compare_key_mismatch() {
        let mut b = flags(&[true, false]);
        let t = flags(&[true, false]);
        b.insert("extra".into(), false);
        assert!(matches!(compare_runs(&b, &t), Err(Error::Data(_))));
        assert!(compare_runs(&BTreeMap::new(), &BTreeMap::new()).is_err());
    }
}
