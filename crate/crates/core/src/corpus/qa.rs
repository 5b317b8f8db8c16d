use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LandCover, Scene};

/// Count answers saturate here so the answer vocabulary stays closed.
pub const MAX_COUNT: usize = 20;

const DOMINANT_Q: &str = "what is the dominant land cover?";
const COVERAGE_Q: &str = "which class covers most of the image?";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionType {
    Yesno,
    Mc,
    Open,
}

impl QuestionType {
    pub fn as_str(self) -> &'static str {
        match self {
            QuestionType::Yesno => "yesno",
            QuestionType::Mc => "mc",
            QuestionType::Open => "open",
        }
    }
}

/// One dataset record. Field order is the manifest's JSON field order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub image_path: String,
    pub question: String,
    pub question_type: QuestionType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    pub answer: String,
}

impl Sample {
    pub fn from_qa(id: String, image_path: String, qa: QaItem) -> Self {
        Self {
            id,
            image_path,
            question: qa.question,
            question_type: qa.question_type,
            choices: qa.choices,
            answer: qa.answer,
        }
    }

    /// Index of the answer among the choices (MC only).
    pub fn gold_choice(&self) -> Option<usize> {
        self.choices
            .as_ref()
            .and_then(|c| c.iter().position(|x| *x == self.answer))
    }
}

/// A question/answer pair before it is attached to an image file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QaItem {
    pub question: String,
    pub question_type: QuestionType,
    pub choices: Option<Vec<String>>,
    pub answer: String,
}

fn presence_question(c: LandCover) -> String {
    format!("is there {}?", c.name())
}

fn count_question(c: LandCover) -> String {
    format!("how many {} cells are there?", c.name())
}

fn count_answer(n: usize) -> String {
    n.min(MAX_COUNT).to_string()
}

/// Five grounded questions per scene: two presence (one present class, one
/// absent class when there is one), dominant-class multiple choice, a count,
/// and an open coverage question.
pub fn generate_qa<R: Rng + ?Sized>(scene: &Scene, rng: &mut R) -> Vec<QaItem> {
    let hist = scene.histogram();
    let present: Vec<LandCover> = LandCover::ALL.into_iter().filter(|c| hist[c.id()] > 0).collect();
    let absent: Vec<LandCover> = LandCover::ALL.into_iter().filter(|c| hist[c.id()] == 0).collect();
    let dominant = scene.dominant();
    let mut out = Vec::with_capacity(5);

    let yes = *present.choose(rng).expect("a scene has at least one cell");
    let other = *absent
        .choose(rng)
        .unwrap_or_else(|| LandCover::ALL.choose(rng).expect("non-empty"));
    for c in [yes, other] {
        out.push(QaItem {
            question: presence_question(c),
            question_type: QuestionType::Yesno,
            choices: None,
            answer: if hist[c.id()] > 0 { "yes" } else { "no" }.to_string(),
        });
    }

    let mut distractors: Vec<LandCover> = LandCover::ALL.into_iter().filter(|&c| c != dominant).collect();
    distractors.shuffle(rng);
    let mut choices: Vec<String> = std::iter::once(dominant)
        .chain(distractors.into_iter().take(3))
        .map(|c| c.name().to_string())
        .collect();
    choices.shuffle(rng);
    out.push(QaItem {
        question: DOMINANT_Q.to_string(),
        question_type: QuestionType::Mc,
        choices: Some(choices),
        answer: dominant.name().to_string(),
    });

    let counted = *LandCover::ALL.choose(rng).expect("non-empty");
    out.push(QaItem {
        question: count_question(counted),
        question_type: QuestionType::Open,
        choices: None,
        answer: count_answer(hist[counted.id()]),
    });

    out.push(QaItem {
        question: COVERAGE_Q.to_string(),
        question_type: QuestionType::Open,
        choices: None,
        answer: dominant.name().to_string(),
    });
    out
}

/// Recomputes the answer to a generated question from the scene alone.
/// `None` when the question is not one this generator produces.
pub fn answer_from_scene(scene: &Scene, question: &str) -> Option<String> {
    let hist = scene.histogram();
    if question == DOMINANT_Q || question == COVERAGE_Q {
        return Some(scene.dominant().name().to_string());
    }
    if let Some(rest) = question.strip_prefix("is there ").and_then(|r| r.strip_suffix('?')) {
        let c = LandCover::from_name(rest)?;
        return Some(if hist[c.id()] > 0 { "yes" } else { "no" }.to_string());
    }
    if let Some(rest) = question
        .strip_prefix("how many ")
        .and_then(|r| r.strip_suffix(" cells are there?"))
    {
        let c = LandCover::from_name(rest)?;
        return Some(count_answer(hist[c.id()]));
    }
    None
}

/// Every question and answer string the generator can emit.
pub fn lexicon() -> Vec<String> {
    let mut out = vec![
        DOMINANT_Q.to_string(),
        COVERAGE_Q.to_string(),
        "yes".to_string(),
        "no".to_string(),
    ];
    for c in LandCover::ALL {
        out.push(presence_question(c));
        out.push(count_question(c));
        out.push(c.name().to_string());
    }
    out.extend((0..=MAX_COUNT).map(|n| n.to_string()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_scene, SceneConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn all(c: LandCover) -> Scene {
        Scene::from_cells(8, vec![c; 64], 0).unwrap()
    }

    #[test]
    fn all_water_scene() {
        let s = all(LandCover::Water);
        let qa = generate_qa(&s, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(qa[0].question, "is there water?");
        assert_eq!(qa[0].answer, "yes");
        assert_eq!(qa[1].answer, "no");
        assert_eq!(answer_from_scene(&s, "is there forest?").as_deref(), Some("no"));
        assert_eq!(qa[2].question_type, QuestionType::Mc);
        assert_eq!(qa[2].answer, "water");
        let choices = qa[2].choices.as_ref().unwrap();
        assert_eq!(choices.len(), 4);
        assert!(choices.contains(&"water".to_string()));
        assert_eq!(qa[4].answer, "water");
    }

    #[test]
    fn count_answer_matches_grid() {
        let mut cells = vec![LandCover::Forest; 64];
        for c in cells.iter_mut().take(10) {
            *c = LandCover::Urban;
        }
        let s = Scene::from_cells(8, cells, 0).unwrap();
        assert_eq!(
            answer_from_scene(&s, "how many urban cells are there?").as_deref(),
            Some("10")
        );
        // saturates at MAX_COUNT
        assert_eq!(
            answer_from_scene(&s, "how many forest cells are there?").as_deref(),
            Some("20")
        );
    }

    #[test]
    fn generated_answers_are_sound() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..50 {
            let s = generate_scene(seed, &SceneConfig::default()).unwrap();
            for qa in generate_qa(&s, &mut rng) {
                assert_eq!(answer_from_scene(&s, &qa.question).as_ref(), Some(&qa.answer));
                if let Some(ch) = &qa.choices {
                    assert!(ch.contains(&qa.answer));
                }
            }
        }
    }

    #[test]
    fn lexicon_covers_generated_text() {
        let lex = lexicon();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for seed in 0..20 {
            let s = generate_scene(seed, &SceneConfig::default()).unwrap();
            for qa in generate_qa(&s, &mut rng) {
                assert!(lex.contains(&qa.question));
                assert!(lex.contains(&qa.answer));
            }
        }
    }
}
