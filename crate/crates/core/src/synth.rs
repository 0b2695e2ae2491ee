//! Deterministic synthetic data: a French-like raw corpus with the kinds of
//! noise the cleaner removes, and small task sets in the benchmark file
//! formats.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::finetune::{TaskData, TaskExample};
use crate::wsd::{instances_to_tsv, SenseExample, SenseInventory, WsdInstance};
use crate::{Error, Result};

const SUBJECTS: &[&str] = &[
    "le chat", "la voisine", "mon frère", "un enfant", "le professeur", "la directrice", "notre équipe",
    "le médecin", "une étudiante", "le boulanger", "la mairie", "ce musicien", "le gouvernement", "ma tante",
    "un touriste", "le journaliste", "la police", "cette entreprise", "le jardinier", "la chorale",
];
const VERBS: &[&str] = &[
    "regarde", "prépare", "cherche", "achète", "répare", "découvre", "présente", "attend", "choisit",
    "organise", "vend", "construit", "dessine", "raconte", "écoute", "visite", "termine", "commande",
];
const OBJECTS: &[&str] = &[
    "le journal", "une tarte aux pommes", "la voiture rouge", "un vieux livre", "les résultats", "la maison",
    "une chanson", "le marché", "un billet de train", "la route", "les fleurs du jardin", "une histoire",
    "le nouveau projet", "la réunion", "un cadeau", "les photos", "la bibliothèque", "un tableau",
];
const PLACES: &[&str] = &[
    "à paris", "dans la cuisine", "près de la gare", "au bord de la mer", "en ville", "à l'école",
    "dans le jardin", "à la campagne", "devant l'hôtel", "sous la pluie", "au marché", "à lyon",
];
const TIMES: &[&str] = &[
    "ce matin", "hier soir", "depuis trois jours", "chaque semaine", "avant midi", "pendant l'été",
    "après le dîner", "le dimanche", "tout à l'heure", "en 2019",
];
const OPINIONS_POS: &[&str] = &["excellent", "magnifique", "passionnant", "superbe", "formidable", "réussi"];
const OPINIONS_NEG: &[&str] = &["ennuyeux", "décevant", "médiocre", "raté", "pénible", "lamentable"];

fn pick<'a, R: Rng>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs[rng.gen_range(0..xs.len())]
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

/// One clean-looking French sentence.
pub fn sentence<R: Rng>(rng: &mut R) -> String {
    let mut s = format!("{} {} {}", pick(rng, SUBJECTS), pick(rng, VERBS), pick(rng, OBJECTS));
    if rng.gen_bool(0.6) {
        s.push(' ');
        s.push_str(pick(rng, PLACES));
    }
    if rng.gen_bool(0.4) {
        s.push_str(", ");
        s.push_str(pick(rng, TIMES));
    }
    if rng.gen_bool(0.2) {
        s.push_str(" ; c'est ");
        let pool = if rng.gen_bool(0.5) { OPINIONS_POS } else { OPINIONS_NEG };
        s.push_str(pick(rng, pool));
    }
    let end = [".", ".", ".", " !", " ?", "..."][rng.gen_range(0..6)];
    capitalize(&s) + end
}

/// Raw corpus text of about `target_bytes`, one candidate per line, with
/// duplicates, short lines, contact details, URLs and number tables mixed in.
pub fn raw_corpus(seed: u64, target_bytes: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(target_bytes + 256);
    let mut recent: Vec<String> = Vec::new();
    while out.len() < target_bytes {
        let roll: f64 = rng.gen();
        let line = if roll < 0.80 {
            sentence(&mut rng)
        } else if roll < 0.85 && !recent.is_empty() {
            recent[rng.gen_range(0..recent.len())].clone()
        } else if roll < 0.88 {
            ["Merci !", "Oui.", "Accueil", "Page 2"][rng.gen_range(0..4)].to_string()
        } else if roll < 0.90 {
            format!("Tél : 0{} {:02} {:02} {:02} {:02}", rng.gen_range(1..10), rng.gen_range(0..100), rng.gen_range(0..100), rng.gen_range(0..100), rng.gen_range(0..100))
        } else if roll < 0.92 {
            format!("Écrivez à contact{}@exemple.fr pour plus d'informations", rng.gen_range(0..100))
        } else if roll < 0.94 {
            format!("Plus de détails sur https://www.exemple{}.fr/page", rng.gen_range(0..100))
        } else if roll < 0.96 {
            (0..8).map(|_| rng.gen_range(0..10_000).to_string()).collect::<Vec<_>>().join(" ")
        } else if roll < 0.98 {
            "*** --- ### === +++ ... ---".to_string()
        } else {
            // decomposed accents, normalized away by the cleaner
            sentence(&mut rng).replace('é', "e\u{301}")
        };
        if recent.len() < 64 {
            recent.push(line.clone());
        } else {
            let i = rng.gen_range(0..64);
            recent[i] = line.clone();
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Tokenized sentence for task data (lowercase, punctuation split).
fn task_sentence<R: Rng>(rng: &mut R) -> Vec<String> {
    let mut s = format!("{} {} {}", pick(rng, SUBJECTS), pick(rng, VERBS), pick(rng, OBJECTS));
    if rng.gen_bool(0.5) {
        s.push(' ');
        s.push_str(pick(rng, PLACES));
    }
    s.push_str(" .");
    words(&s.replace("l'", "l' "))
}

/// Two-class set where the label is whether `marker` occurs.
pub fn marker_task(seed: u64, n_train: usize, n_test: usize, marker: &str) -> TaskData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |n: usize| -> Vec<TaskExample> {
        (0..n)
            .map(|i| {
                let mut t = task_sentence(&mut rng);
                let label = i % 2;
                if label == 1 {
                    let at = rng.gen_range(0..t.len());
                    t.insert(at, marker.to_string());
                }
                TaskExample { text_a: t, text_b: None, label }
            })
            .collect()
    };
    let mut train = make(n_train);
    let test = make(n_test);
    train.shuffle(&mut rng);
    TaskData { train, dev: Vec::new(), test, num_classes: 2 }
}

/// Review-style sentiment set, balanced.
pub fn cls_task(seed: u64, n_train: usize, n_test: usize) -> TaskData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |n: usize| -> Vec<TaskExample> {
        (0..n)
            .map(|i| {
                let label = i % 2;
                let adj = pick(&mut rng, if label == 1 { OPINIONS_POS } else { OPINIONS_NEG });
                let mut t = task_sentence(&mut rng);
                t.pop();
                t.extend(words(&format!("; c' est {adj} .")));
                TaskExample { text_a: t, text_b: None, label }
            })
            .collect()
    };
    TaskData { train: make(n_train), dev: Vec::new(), test: make(n_test), num_classes: 2 }
}

/// Paraphrase pairs: label 1 when `b` repeats `a`, 0 when its words are shuffled.
pub fn pawsx_task(seed: u64, n_train: usize, n_dev: usize, n_test: usize) -> TaskData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |n: usize| -> Vec<TaskExample> {
        (0..n)
            .map(|i| {
                let a = task_sentence(&mut rng);
                let label = i % 2;
                let mut b = a.clone();
                if label == 0 {
                    let body = b.len() - 1;
                    b[..body].shuffle(&mut rng);
                }
                TaskExample { text_a: a, text_b: Some(b), label }
            })
            .collect()
    };
    TaskData { train: make(n_train), dev: make(n_dev), test: make(n_test), num_classes: 2 }
}

/// Three-way inference pairs keyed by a cue word in the hypothesis.
pub fn xnli_task(seed: u64, n_train: usize, n_dev: usize, n_test: usize) -> TaskData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cues = ["vraiment", "peut-être", "jamais"];
    let mut make = |n: usize| -> Vec<TaskExample> {
        (0..n)
            .map(|i| {
                let a = task_sentence(&mut rng);
                let label = i % 3;
                let mut b = task_sentence(&mut rng);
                b.insert(2, cues[label].to_string());
                TaskExample { text_a: a, text_b: Some(b), label }
            })
            .collect()
    };
    TaskData { train: make(n_train), dev: make(n_dev), test: make(n_test), num_classes: 3 }
}

/// Verb senses: each sense of a lemma comes with its own context words.
const VERB_SENSES: &[(&str, &[(&str, &str, &[&str])])] = &[
    ("tirer", &[("tirer_1", "faire feu", &["le chasseur", "avec son fusil", "sur la cible"]), ("tirer_2", "amener vers soi", &["la corde", "le rideau", "la porte"])]),
    ("voler", &[("voler_1", "se déplacer dans l'air", &["l'oiseau", "au-dessus des nuages", "avec ses ailes"]), ("voler_2", "dérober", &["le portefeuille", "le voleur", "dans la boutique"])]),
    ("louer", &[("louer_1", "prendre en location", &["un appartement", "pour les vacances", "une voiture"]), ("louer_2", "faire l'éloge", &["son courage", "les mérites", "devant tous"])]),
];

/// Inventory with `per_sense` examples per sense, plus test instances.
pub fn verb_wsd(seed: u64, per_sense: usize, n_test: usize) -> (SenseInventory, Vec<WsdInstance>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let make = |lemma: &str, ctx: &[&str], rng: &mut ChaCha8Rng| -> (Vec<String>, usize) {
        let mut t = words(pick(rng, SUBJECTS));
        let target = t.len();
        t.push(lemma.to_string());
        t.extend(words(&pick(rng, ctx).replace('\'', "' ")));
        t.push(".".into());
        (t, target)
    };
    let mut inv = SenseInventory::default();
    for (lemma, senses) in VERB_SENSES {
        for (id, gloss, ctx) in senses.iter() {
            for _ in 0..per_sense.max(1) {
                let (tokens, target) = make(lemma, ctx, &mut rng);
                inv.add(lemma, id, gloss, Some(SenseExample { tokens, target }));
            }
        }
    }
    let test = (0..n_test)
        .map(|i| {
            let (lemma, senses) = VERB_SENSES[i % VERB_SENSES.len()];
            let (id, _, ctx) = senses[(i / VERB_SENSES.len()) % senses.len()];
            let (tokens, target) = make(lemma, ctx, &mut rng);
            WsdInstance { tokens, target, lemma: lemma.into(), gold: id.into() }
        })
        .collect();
    (inv, test)
}

/// Noun instances whose synset is a fixed function of the word.
pub fn noun_wsd(seed: u64, n_sentences: usize) -> Vec<WsdInstance> {
    const NOUNS: &[(&str, &str)] = &[
        ("chat", "s_animal"), ("chien", "s_animal"), ("maison", "s_bâtiment"), ("école", "s_bâtiment"),
        ("pomme", "s_fruit"), ("poire", "s_fruit"), ("livre", "s_objet"), ("table", "s_objet"),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..n_sentences {
        let (n1, s1) = NOUNS[rng.gen_range(0..NOUNS.len())];
        let (n2, s2) = NOUNS[rng.gen_range(0..NOUNS.len())];
        let verb = pick(&mut rng, VERBS);
        let tokens = words(&format!("le {n1} {verb} la {n2} ."));
        out.push(WsdInstance { tokens: tokens.clone(), target: 1, lemma: n1.into(), gold: s1.into() });
        out.push(WsdInstance { tokens, target: 4, lemma: n2.into(), gold: s2.into() });
    }
    out
}

pub fn task_tsv(examples: &[TaskExample]) -> String {
    let pair = examples.first().is_some_and(|e| e.text_b.is_some());
    let mut s = String::from(if pair { "text_a\ttext_b\tlabel\n" } else { "text\tlabel\n" });
    for e in examples {
        match &e.text_b {
            Some(b) => {
                let _ = writeln!(s, "{}\t{}\t{}", e.text_a.join(" "), b.join(" "), e.label);
            }
            None => {
                let _ = writeln!(s, "{}\t{}", e.text_a.join(" "), e.label);
            }
        }
    }
    s
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write every benchmark task under `dir/<task>/` at desk scale.
pub fn write_benchmark_data(dir: &Path, seed: u64, size: usize) -> Result<()> {
    let sets = [
        ("cls-books", cls_task(seed, size, size / 2)),
        ("cls-dvd", cls_task(seed + 1, size, size / 2)),
        ("cls-music", cls_task(seed + 2, size, size / 2)),
        ("pawsx", pawsx_task(seed + 3, size, size / 4, size / 4)),
        ("xnli", xnli_task(seed + 4, size, size / 4, size / 4)),
    ];
    for (name, data) in &sets {
        let d = dir.join(name);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        write(&d.join("train.tsv"), &task_tsv(&data.train))?;
        write(&d.join("test.tsv"), &task_tsv(&data.test))?;
        if !data.dev.is_empty() {
            write(&d.join("dev.tsv"), &task_tsv(&data.dev))?;
        }
    }
    let d = dir.join("wsd-verb");
    fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    let (inv, test) = verb_wsd(seed + 5, 3, size / 2);
    write(&d.join("inventory.tsv"), &inv.to_tsv())?;
    write(&d.join("test.tsv"), &instances_to_tsv(&test))?;
    let d = dir.join("wsd-noun");
    fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    write(&d.join("train.tsv"), &instances_to_tsv(&noun_wsd(seed + 6, size / 2)))?;
    write(&d.join("test.tsv"), &instances_to_tsv(&noun_wsd(seed + 7, size / 4)))?;
    Ok(())
}
