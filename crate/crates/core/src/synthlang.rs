//! Synthetic parallel languages.
//!
//! A [`LanguageFamily`] partitions a token-id space into a shared structural
//! slice (BOS, separator, language-id marker and one label token per
//! language) followed by per-language content slices. Every language realizes
//! the same inventory of latent meanings, so a [`LatentSentence`] renders into
//! an aligned sentence in each language. Optional sibling pairs share a
//! fraction of their lexicon (cognates).
//!
//! Everything here is a pure function of `(config, seed)`.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};

pub type TokenId = u32;
pub type LangId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pos {
    Det,
    Adj,
    Noun,
    Verb,
}

impl Pos {
    pub const ALL: [Pos; 4] = [Pos::Det, Pos::Adj, Pos::Noun, Pos::Verb];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrammarConfig {
    /// Inclusive sentence length range in slots.
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a verb (object noun) is drawn from the short list
    /// preferred by the subject noun (verb) instead of uniformly.
    pub preference_strength: f64,
    /// Size of each preference list.
    pub preferred_choices: usize,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        Self {
            min_len: 4,
            max_len: 8,
            preference_strength: 0.7,
            preferred_choices: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyConfig {
    pub num_languages: usize,
    pub tokens_per_language: usize,
    pub overlap_fraction: f64,
    #[serde(default)]
    pub grammar: GrammarConfig,
    pub seed: u64,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        Self {
            num_languages: 4,
            tokens_per_language: 64,
            overlap_fraction: 0.0,
            grammar: GrammarConfig::default(),
            seed: 0,
        }
    }
}

impl FamilyConfig {
    pub fn shared_token_count(&self) -> usize {
        3 + self.num_languages
    }

    /// Tokens shared by each sibling pair.
    pub fn sibling_shared_count(&self) -> usize {
        (self.overlap_fraction * self.tokens_per_language as f64).round() as usize
    }

    pub fn total_vocab(&self) -> usize {
        let k = self.num_languages;
        let n = self.tokens_per_language;
        let pairs = if self.sibling_shared_count() > 0 { k / 2 } else { 0 };
        self.shared_token_count() + k * n - pairs * self.sibling_shared_count()
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.num_languages < 2 {
            errs.push(format!(
                "corpus.languages must be >= 2 (got {})",
                self.num_languages
            ));
        }
        if self.tokens_per_language < 20 {
            errs.push(format!(
                "corpus.tokens_per_language must be >= 20 (got {})",
                self.tokens_per_language
            ));
        }
        if !(0.0..=1.0).contains(&self.overlap_fraction) {
            errs.push(format!(
                "corpus.overlap must lie in [0, 1] (got {})",
                self.overlap_fraction
            ));
        } else if self.sibling_shared_count() > 0 && self.num_languages % 2 != 0 {
            errs.push(format!(
                "corpus.overlap > 0 pairs languages into siblings and needs an even corpus.languages (got {})",
                self.num_languages
            ));
        }
        let g = &self.grammar;
        if g.min_len < 3 || g.min_len > g.max_len {
            errs.push(format!(
                "grammar length range [{}, {}] is invalid (need 3 <= min <= max)",
                g.min_len, g.max_len
            ));
        }
        if !(0.0..=1.0).contains(&g.preference_strength) {
            errs.push("grammar.preference_strength must lie in [0, 1]".into());
        }
        if g.preferred_choices == 0 {
            errs.push("grammar.preferred_choices must be >= 1".into());
        }
        errs
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedTokens {
    pub bos: TokenId,
    pub sep: TokenId,
    pub langid: TokenId,
    /// `labels[l]` names language `l`.
    pub labels: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Language {
    pub id: LangId,
    pub name: String,
    pub sibling: Option<LangId>,
    /// Half-open range of tokens used only by this language.
    pub unique: (TokenId, TokenId),
    /// Half-open range of tokens shared with the sibling.
    pub shared_with_sibling: Option<(TokenId, TokenId)>,
    /// Token realizing each inventory slot, indexed by [`LanguageFamily::slot_index`].
    pub lexicon: Vec<TokenId>,
}

impl Language {
    pub fn owns(&self, t: TokenId) -> bool {
        let in_range = |(a, b): (TokenId, TokenId)| t >= a && t < b;
        in_range(self.unique) || self.shared_with_sibling.is_some_and(in_range)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageFamily {
    pub config: FamilyConfig,
    pub shared: SharedTokens,
    pub languages: Vec<Language>,
    /// Number of meanings per part of speech, indexed by `Pos as usize`.
    pub pos_counts: [usize; 4],
    /// Verbs a subject noun prefers.
    pub verbs_for_noun: Vec<Vec<u16>>,
    /// Object nouns a verb prefers.
    pub objects_for_verb: Vec<Vec<u16>>,
    pub vocab_size: usize,
}

fn pos_counts(n: usize) -> [usize; 4] {
    let det = (n / 10).max(2);
    let adj = n / 4;
    let verb = n / 4;
    let noun = n - det - adj - verb;
    [det, adj, noun, verb]
}

impl LanguageFamily {
    /// Builds the family. `vocab_limit` is the embedding table size of the
    /// model that will consume it, when known.
    pub fn new(config: &FamilyConfig, vocab_limit: Option<usize>) -> Result<Self> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Validation(errs));
        }
        let total = config.total_vocab();
        if let Some(limit) = vocab_limit {
            if total > limit {
                return Err(Error::Config(format!(
                    "corpus.languages ({}) x corpus.tokens_per_language ({}) plus {} shared tokens needs {} ids, above model.vocab_size ({})",
                    config.num_languages,
                    config.tokens_per_language,
                    config.shared_token_count(),
                    total,
                    limit
                )));
            }
        }

        let k = config.num_languages;
        let n = config.tokens_per_language;
        let s = config.sibling_shared_count();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

        let shared = SharedTokens {
            bos: 0,
            sep: 1,
            langid: 2,
            labels: (0..k as TokenId).map(|l| 3 + l).collect(),
        };
        let counts = pos_counts(n);

        let mut next = config.shared_token_count() as TokenId;
        let mut languages: Vec<Language> = Vec::with_capacity(k);
        let mut l = 0;
        while l < k {
            let group: Vec<LangId> = if s > 0 { vec![l, l + 1] } else { vec![l] };
            let uniq_len = (n - if s > 0 { s } else { 0 }) as TokenId;
            let mut uniques = Vec::new();
            for _ in &group {
                uniques.push((next, next + uniq_len));
                next += uniq_len;
            }
            let shared_range = if s > 0 {
                let r = (next, next + s as TokenId);
                next += s as TokenId;
                Some(r)
            } else {
                None
            };
            // Cognate slots are drawn once per pair so both siblings agree.
            let mut slots: Vec<usize> = (0..n).collect();
            slots.shuffle(&mut rng);
            let cognates: BTreeSet<usize> = slots[..s.min(n)].iter().copied().collect();

            for (gi, &lang) in group.iter().enumerate() {
                let (ua, ub) = uniques[gi];
                let mut uniq_tokens: Vec<TokenId> = (ua..ub).collect();
                uniq_tokens.shuffle(&mut rng);
                let mut lexicon = vec![0; n];
                let mut ui = uniq_tokens.into_iter();
                let mut ci = shared_range.map(|(a, _)| a);
                for (slot, entry) in lexicon.iter_mut().enumerate() {
                    if cognates.contains(&slot) && s > 0 {
                        let c = ci.as_mut().unwrap();
                        *entry = *c;
                        *c += 1;
                    } else {
                        *entry = ui.next().expect("unique slice sized to lexicon");
                    }
                }
                languages.push(Language {
                    id: lang,
                    name: format!("L{lang}"),
                    sibling: if s > 0 { Some(lang ^ 1) } else { None },
                    unique: (ua, ub),
                    shared_with_sibling: shared_range,
                    lexicon,
                });
            }
            l += group.len();
        }
        debug_assert_eq!(next as usize, total);

        let g = &config.grammar;
        let [_, _, nouns, verbs] = counts;
        let pick = |rng: &mut ChaCha8Rng, upper: usize| -> Vec<u16> {
            let mut all: Vec<u16> = (0..upper as u16).collect();
            all.shuffle(rng);
            all.truncate(g.preferred_choices.min(upper));
            all
        };
        let verbs_for_noun = (0..nouns).map(|_| pick(&mut rng, verbs)).collect();
        let objects_for_verb = (0..verbs).map(|_| pick(&mut rng, nouns)).collect();

        Ok(Self {
            config: config.clone(),
            shared,
            languages,
            pos_counts: counts,
            verbs_for_noun,
            objects_for_verb,
            vocab_size: total,
        })
    }

    pub fn num_languages(&self) -> usize {
        self.languages.len()
    }

    pub fn shared_token_count(&self) -> usize {
        self.config.shared_token_count()
    }

    pub fn is_structural(&self, t: TokenId) -> bool {
        (t as usize) < self.shared_token_count()
    }

    pub fn label(&self, lang: LangId) -> Result<TokenId> {
        self.shared
            .labels
            .get(lang)
            .copied()
            .ok_or(Error::OutOfRange {
                what: "language",
                index: lang,
                limit: self.num_languages(),
            })
    }

    pub fn slot_index(&self, pos: Pos, meaning: u16) -> Result<usize> {
        let count = self.pos_counts[pos.index()];
        if meaning as usize >= count {
            return Err(Error::Invalid(format!(
                "semantic id {pos:?}:{meaning} outside inventory ({count} meanings)"
            )));
        }
        Ok(self.pos_counts[..pos.index()].iter().sum::<usize>() + meaning as usize)
    }

    pub fn language(&self, lang: LangId) -> Result<&Language> {
        self.languages.get(lang).ok_or(Error::OutOfRange {
            what: "language",
            index: lang,
            limit: self.num_languages(),
        })
    }

    pub fn word(&self, lang: LangId, slot: Slot) -> Result<TokenId> {
        let idx = self.slot_index(slot.pos, slot.meaning)?;
        Ok(self.language(lang)?.lexicon[idx])
    }

    pub fn render(&self, lang: LangId, latent: &LatentSentence) -> Result<Vec<TokenId>> {
        latent.slots.iter().map(|&s| self.word(lang, s)).collect()
    }

    /// Languages whose content slice contains `t`.
    pub fn owners(&self, t: TokenId) -> impl Iterator<Item = LangId> + '_ {
        self.languages.iter().filter(move |l| l.owns(t)).map(|l| l.id)
    }

    /// `<BOS> s`
    pub fn lm_text(&self, sentence: &[TokenId]) -> Vec<TokenId> {
        let mut v = Vec::with_capacity(sentence.len() + 1);
        v.push(self.shared.bos);
        v.extend_from_slice(sentence);
        v
    }

    /// `<BOS> s <LANGID>`; the language label is predicted at the last position.
    pub fn langid_prompt(&self, sentence: &[TokenId]) -> Vec<TokenId> {
        let mut v = self.lm_text(sentence);
        v.push(self.shared.langid);
        v
    }

    /// `<BOS> s <SEP>`; the model continues with another sentence.
    pub fn continuation_prompt(&self, sentence: &[TokenId]) -> Vec<TokenId> {
        let mut v = self.lm_text(sentence);
        v.push(self.shared.sep);
        v
    }

    /// Exact vocabulary-membership language identification.
    pub fn classify(&self, tokens: &[TokenId]) -> Classification {
        let mut counts = vec![0usize; self.num_languages()];
        let mut content = 0usize;
        for &t in tokens {
            if self.is_structural(t) {
                continue;
            }
            content += 1;
            for l in self.owners(t) {
                counts[l] += 1;
            }
        }
        if content == 0 {
            return Classification::Undetermined;
        }
        // max_by_key keeps the last maximum; iterate in reverse so ties go to the lowest id.
        let (lang, &best) = counts
            .iter()
            .enumerate()
            .rev()
            .max_by_key(|(_, c)| **c)
            .unwrap();
        Classification::Language {
            lang,
            confidence: best as f64 / content as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Classification {
    Language { lang: LangId, confidence: f64 },
    Undetermined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Slot {
    pub pos: Pos,
    pub meaning: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentSentence {
    pub slots: Vec<Slot>,
}

impl LatentSentence {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn final_noun(&self) -> Slot {
        *self.slots.last().expect("latent sentences are non-empty")
    }
}

fn noun_phrase(
    family: &LanguageFamily,
    len: usize,
    noun: u16,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<Slot>,
) {
    let [dets, adjs, _, _] = family.pos_counts;
    let det = |rng: &mut ChaCha8Rng| Slot {
        pos: Pos::Det,
        meaning: rng.gen_range(0..dets) as u16,
    };
    let adj = |rng: &mut ChaCha8Rng| Slot {
        pos: Pos::Adj,
        meaning: rng.gen_range(0..adjs) as u16,
    };
    match len {
        1 => {}
        2 => {
            if rng.gen_bool(0.5) {
                out.push(det(rng))
            } else {
                out.push(adj(rng))
            }
        }
        _ => {
            out.push(det(rng));
            for _ in 0..len - 2 {
                out.push(adj(rng));
            }
        }
    }
    out.push(Slot {
        pos: Pos::Noun,
        meaning: noun,
    });
}

fn preferred(rng: &mut ChaCha8Rng, strength: f64, list: &[u16], upper: usize) -> u16 {
    if rng.gen_bool(strength) {
        *list.choose(rng).unwrap()
    } else {
        rng.gen_range(0..upper) as u16
    }
}

/// Samples `count` latent sentences of the form `NP VERB NP`, each ending
/// with a noun.
pub fn sample_latents(
    family: &LanguageFamily,
    count: usize,
    seed: u64,
) -> Result<Vec<LatentSentence>> {
    if count == 0 {
        return Err(Error::Invalid("latent count must be >= 1".into()));
    }
    let g = &family.config.grammar;
    let [_, _, nouns, verbs] = family.pos_counts;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = rng.gen_range(g.min_len..=g.max_len);
        let np_total = len - 1;
        let subj_len = rng.gen_range(1..np_total);
        let obj_len = np_total - subj_len;

        let subj = rng.gen_range(0..nouns) as u16;
        let verb = preferred(
            &mut rng,
            g.preference_strength,
            &family.verbs_for_noun[subj as usize],
            verbs,
        );
        let obj = preferred(
            &mut rng,
            g.preference_strength,
            &family.objects_for_verb[verb as usize],
            nouns,
        );

        let mut slots = Vec::with_capacity(len);
        noun_phrase(family, subj_len, subj, &mut rng, &mut slots);
        slots.push(Slot {
            pos: Pos::Verb,
            meaning: verb,
        });
        noun_phrase(family, obj_len, obj, &mut rng, &mut slots);
        debug_assert_eq!(slots.len(), len);
        out.push(LatentSentence { slots });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelCorpus {
    pub latents: Vec<LatentSentence>,
    /// `renderings[lang][j]` realizes `latents[j]` in `lang`.
    pub renderings: Vec<Vec<Vec<TokenId>>>,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }
}

pub fn render_parallel(
    family: &LanguageFamily,
    latents: &[LatentSentence],
) -> Result<ParallelCorpus> {
    if latents.is_empty() {
        return Err(Error::Empty("no latents to render".into()));
    }
    let renderings = (0..family.num_languages())
        .map(|l| latents.iter().map(|s| family.render(l, s)).collect())
        .collect::<Result<Vec<Vec<_>>>>()?;
    Ok(ParallelCorpus {
        latents: latents.to_vec(),
        renderings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeSwitchItem {
    /// Index into [`CodeSwitchSet::latents`].
    pub latent: usize,
    pub noun_language: LangId,
    /// Prefix in the prefix language followed by the noun in `noun_language`.
    pub prefixed: Vec<TokenId>,
    /// The noun alone.
    pub standalone: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeSwitchSet {
    pub prefix_language: LangId,
    pub noun_languages: Vec<LangId>,
    pub latents: Vec<LatentSentence>,
    pub items: Vec<CodeSwitchItem>,
}

impl CodeSwitchSet {
    pub fn items_for(&self, noun_language: LangId) -> impl Iterator<Item = &CodeSwitchItem> {
        self.items
            .iter()
            .filter(move |i| i.noun_language == noun_language)
    }
}

/// Sentences in `prefix_language` whose final noun is swapped for its
/// equivalent in each of `noun_languages`.
pub fn make_code_switch_set(
    family: &LanguageFamily,
    prefix_language: LangId,
    noun_languages: &[LangId],
    count: usize,
    seed: u64,
) -> Result<CodeSwitchSet> {
    family.language(prefix_language)?;
    if noun_languages.is_empty() {
        return Err(Error::Empty("no noun languages".into()));
    }
    for &l in noun_languages {
        family.language(l)?;
    }
    let latents = sample_latents(family, count, seed)?;
    let mut items = Vec::with_capacity(latents.len() * noun_languages.len());
    for (j, latent) in latents.iter().enumerate() {
        let prefix = family.render(prefix_language, latent)?;
        let stem = &prefix[..prefix.len() - 1];
        for &nl in noun_languages {
            let noun = family.word(nl, latent.final_noun())?;
            let mut prefixed = stem.to_vec();
            prefixed.push(noun);
            items.push(CodeSwitchItem {
                latent: j,
                noun_language: nl,
                prefixed,
                standalone: vec![noun],
            });
        }
    }
    Ok(CodeSwitchSet {
        prefix_language,
        noun_languages: noun_languages.to_vec(),
        latents,
        items,
    })
}

/// Index ranges of the held-out splits. Sentences `[0, fit)` fit feature
/// rankings and steering vectors, `[fit, fit + eval)` are evaluation texts,
/// and the rest is language-model training data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub fit: usize,
    pub eval: usize,
}

impl Split {
    pub fn fit_range(&self) -> std::ops::Range<usize> {
        0..self.fit
    }

    pub fn eval_range(&self) -> std::ops::Range<usize> {
        self.fit..self.fit + self.eval
    }

    pub fn train_range(&self, total: usize) -> std::ops::Range<usize> {
        self.fit + self.eval..total
    }
}

pub const CORPUS_FORMAT: &str = "langfeat-corpus";
pub const CORPUS_VERSION: u32 = 1;

/// The on-disk corpus: family description, latents, renderings and split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusFile {
    pub format: String,
    pub version: u32,
    pub family: LanguageFamily,
    pub split: Split,
    pub corpus: ParallelCorpus,
}

impl CorpusFile {
    pub fn generate(
        config: &FamilyConfig,
        sentences: usize,
        split: Split,
        vocab_limit: Option<usize>,
    ) -> Result<Self> {
        if split.fit == 0 || split.eval == 0 || split.fit + split.eval >= sentences {
            return Err(Error::Config(format!(
                "split fit={} eval={} leaves no training sentences out of {sentences}",
                split.fit, split.eval
            )));
        }
        let family = LanguageFamily::new(config, vocab_limit)?;
        let latents = sample_latents(&family, sentences, config.seed.wrapping_add(1))?;
        let corpus = render_parallel(&family, &latents)?;
        Ok(Self {
            format: CORPUS_FORMAT.into(),
            version: CORPUS_VERSION,
            family,
            split,
            corpus,
        })
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_atomic(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = binio::read_file(path)?;
        let file: CorpusFile = serde_json::from_slice(&bytes).map_err(|e| Error::Corrupt {
            path: path.into(),
            offset: 0,
            msg: format!("corpus JSON: {e}"),
        })?;
        if file.format != CORPUS_FORMAT || file.version != CORPUS_VERSION {
            return Err(Error::UnknownFormat {
                path: path.into(),
                msg: format!("format {} v{}", file.format, file.version),
            });
        }
        Ok(file)
    }

    pub fn sentences(&self, lang: LangId, range: std::ops::Range<usize>) -> &[Vec<TokenId>] {
        &self.corpus.renderings[lang][range]
    }

    pub fn fit(&self, lang: LangId) -> &[Vec<TokenId>] {
        self.sentences(lang, self.split.fit_range())
    }

    pub fn eval(&self, lang: LangId) -> &[Vec<TokenId>] {
        self.sentences(lang, self.split.eval_range())
    }

    pub fn train(&self, lang: LangId) -> &[Vec<TokenId>] {
        self.sentences(lang, self.split.train_range(self.corpus.len()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn family(k: usize, n: usize, overlap: f64, seed: u64) -> LanguageFamily {
        LanguageFamily::new(
            &FamilyConfig {
                num_languages: k,
                tokens_per_language: n,
                overlap_fraction: overlap,
                grammar: GrammarConfig::default(),
                seed,
            },
            None,
        )
        .unwrap()
    }

    fn content_set(f: &LanguageFamily, l: LangId) -> BTreeSet<TokenId> {
        f.languages[l].lexicon.iter().copied().collect()
    }

    #[test]
    fn disjoint_slices_without_overlap() {
        let f = family(4, 64, 0.0, 3);
        for a in 0..4 {
            assert_eq!(content_set(&f, a).len(), 64);
            for b in a + 1..4 {
                assert!(content_set(&f, a).is_disjoint(&content_set(&f, b)));
            }
        }
        assert_eq!(f.vocab_size, 3 + 4 + 4 * 64);
        assert!(f.languages.iter().all(|l| l.sibling.is_none()));
    }

    #[test]
    fn siblings_share_exact_count() {
        let f = family(2, 64, 0.25, 3);
        let common: Vec<_> = content_set(&f, 0)
            .intersection(&content_set(&f, 1))
            .copied()
            .collect();
        assert_eq!(common.len(), 16);
        assert_eq!(f.languages[0].sibling, Some(1));
        assert_eq!(f.languages[1].sibling, Some(0));
        assert_eq!(f.vocab_size, 5 + 2 * 64 - 16);
    }

    #[test]
    fn non_siblings_disjoint_with_overlap() {
        let f = family(4, 40, 0.5, 9);
        assert!(content_set(&f, 0).is_disjoint(&content_set(&f, 2)));
        assert!(content_set(&f, 1).is_disjoint(&content_set(&f, 3)));
        assert_eq!(content_set(&f, 2).intersection(&content_set(&f, 3)).count(), 20);
        // no id collisions: every id in range is owned by someone or structural
        let mut seen = BTreeSet::new();
        for l in &f.languages {
            seen.extend(l.lexicon.iter().copied());
        }
        assert_eq!(seen.len() + f.shared_token_count(), f.vocab_size);
    }

    #[test]
    fn same_seed_byte_identical() {
        let a = serde_json::to_vec(&family(4, 64, 0.25, 11)).unwrap();
        let b = serde_json::to_vec(&family(4, 64, 0.25, 11)).unwrap();
        assert_eq!(a, b);
        let c = serde_json::to_vec(&family(4, 64, 0.25, 12)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_configs() {
        let base = FamilyConfig::default();
        let too_small_vocab = LanguageFamily::new(&base, Some(100));
        assert!(matches!(too_small_vocab, Err(Error::Config(_))));
        for cfg in [
            FamilyConfig {
                num_languages: 1,
                ..base.clone()
            },
            FamilyConfig {
                tokens_per_language: 10,
                ..base.clone()
            },
            FamilyConfig {
                overlap_fraction: 1.5,
                ..base.clone()
            },
            FamilyConfig {
                num_languages: 3,
                overlap_fraction: 0.25,
                ..base.clone()
            },
        ] {
            assert!(matches!(
                LanguageFamily::new(&cfg, None),
                Err(Error::Validation(_))
            ));
        }
    }

    #[test]
    fn latents_deterministic_and_well_formed() {
        let f = family(4, 64, 0.0, 1);
        let a = sample_latents(&f, 100, 7).unwrap();
        let b = sample_latents(&f, 100, 7).unwrap();
        assert_eq!(a, b);
        for s in &a {
            assert!((4..=8).contains(&s.len()));
            assert_eq!(s.final_noun().pos, Pos::Noun);
        }
        assert!(sample_latents(&f, 0, 7).is_err());
    }

    #[test]
    fn render_alignment_and_membership() {
        let f = family(3, 64, 0.0, 5);
        let lat = sample_latents(&f, 1, 2).unwrap();
        let c = render_parallel(&f, &lat).unwrap();
        assert_eq!(c.renderings.len(), 3);
        for r in &c.renderings {
            assert_eq!(r[0].len(), lat[0].len());
        }
        let bad = LatentSentence {
            slots: vec![Slot {
                pos: Pos::Noun,
                meaning: 999,
            }],
        };
        assert!(render_parallel(&f, &[bad]).is_err());
        assert!(render_parallel(&f, &[]).is_err());
    }

    #[test]
    fn classifier_recovers_every_rendering() {
        let f = family(4, 64, 0.0, 5);
        let lat = sample_latents(&f, 300, 2).unwrap();
        let c = render_parallel(&f, &lat).unwrap();
        for (l, rs) in c.renderings.iter().enumerate() {
            for r in rs {
                assert_eq!(
                    f.classify(r),
                    Classification::Language {
                        lang: l,
                        confidence: 1.0
                    }
                );
                // structural tokens are ignored
                assert_eq!(f.classify(&f.continuation_prompt(r)), f.classify(r));
            }
        }
    }

    #[test]
    fn classifier_majority_and_ties() {
        let f = family(4, 64, 0.0, 5);
        let w = |l: usize, i: usize| f.languages[l].lexicon[i];
        let toks = [w(1, 0), w(1, 1), w(1, 2), w(3, 0)];
        assert_eq!(
            f.classify(&toks),
            Classification::Language {
                lang: 1,
                confidence: 0.75
            }
        );
        assert_eq!(
            f.classify(&[w(2, 0), w(0, 0)]),
            Classification::Language {
                lang: 0,
                confidence: 0.5
            }
        );
        assert_eq!(
            f.classify(&[f.shared.bos, f.shared.sep]),
            Classification::Undetermined
        );
    }

    #[test]
    fn code_switch_counts_and_minimality() {
        let f = family(4, 64, 0.25, 5);
        let cs = make_code_switch_set(&f, 0, &[0, 1, 2], 5, 3).unwrap();
        assert_eq!(cs.items.len(), 15);
        for nl in [0, 1, 2] {
            assert_eq!(cs.items_for(nl).count(), 5);
        }
        for j in 0..5 {
            let variants: Vec<_> = cs.items.iter().filter(|i| i.latent == j).collect();
            let base = &variants[0].prefixed;
            for v in &variants {
                assert_eq!(v.prefixed.len(), base.len());
                let diff: Vec<usize> = (0..base.len())
                    .filter(|&p| v.prefixed[p] != base[p])
                    .collect();
                assert!(diff.iter().all(|&p| p == base.len() - 1));
                assert_eq!(v.standalone, vec![*v.prefixed.last().unwrap()]);
            }
            // same-language variant is the plain rendering
            let mono = variants.iter().find(|v| v.noun_language == 0).unwrap();
            assert_eq!(mono.prefixed, f.render(0, &cs.latents[j]).unwrap());
        }
        assert!(make_code_switch_set(&f, 0, &[7], 5, 3).is_err());
        assert!(make_code_switch_set(&f, 9, &[1], 5, 3).is_err());
    }

    #[test]
    fn corpus_file_roundtrip() {
        let cfg = FamilyConfig {
            seed: 4,
            ..FamilyConfig::default()
        };
        let file = CorpusFile::generate(&cfg, 50, Split { fit: 10, eval: 20 }, Some(512)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        file.save(&p).unwrap();
        let back = CorpusFile::load(&p).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.to_json().unwrap(), file.to_json().unwrap());
        assert_eq!(back.train(0).len(), 20);
    }

    proptest! {
        #[test]
        fn partition_invariants(k in 1usize..4, n in 20usize..80, ov in 0.0f64..1.0, seed in 0u64..1000) {
            let k = k * 2;
            let f = family(k, n, ov, seed);
            prop_assert_eq!(f.vocab_size, f.config.total_vocab());
            for a in 0..k {
                let sa = content_set(&f, a);
                prop_assert_eq!(sa.len(), n);
                prop_assert!(sa.iter().all(|&t| (t as usize) >= f.shared_token_count() && (t as usize) < f.vocab_size));
                for b in a + 1..k {
                    let common = sa.intersection(&content_set(&f, b)).count();
                    if f.languages[a].sibling == Some(b) {
                        prop_assert_eq!(common, f.config.sibling_shared_count());
                    } else {
                        prop_assert_eq!(common, 0);
                    }
                }
            }
        }
    }
}
