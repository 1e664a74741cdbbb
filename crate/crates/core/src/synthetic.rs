//! Seeded generator of Spanish-like comment threads whose liked comments
//! are the ones that talk about the news topic.
//!
//! Each thread picks a topic. The title and the on-topic comments draw
//! from that topic's word list; off-topic chatter draws from a shared
//! pool. On-topic comments receive many likes, chatter few or none.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{RawComment, RawThread};

const TOPICS: [&[&str]; 10] = [
    &[
        "gobierno",
        "ministro",
        "reforma",
        "impuesto",
        "congreso",
        "ley",
        "votación",
        "senado",
    ],
    &[
        "partido",
        "gol",
        "equipo",
        "estadio",
        "técnico",
        "campeonato",
        "jugador",
        "hinchas",
    ],
    &[
        "lluvia",
        "temporal",
        "invierno",
        "frente",
        "inundación",
        "calles",
        "alerta",
        "viento",
    ],
    &[
        "hospital",
        "médicos",
        "pacientes",
        "salud",
        "vacuna",
        "urgencia",
        "espera",
        "camas",
    ],
    &[
        "colegio",
        "profesores",
        "alumnos",
        "educación",
        "clases",
        "paro",
        "matrícula",
        "notas",
    ],
    &[
        "metro",
        "transporte",
        "tarifa",
        "buses",
        "pasaje",
        "línea",
        "estación",
        "horario",
    ],
    &[
        "incendio",
        "bomberos",
        "bosque",
        "hectáreas",
        "forestal",
        "humo",
        "evacuación",
        "brigada",
    ],
    &[
        "economía",
        "dólar",
        "inflación",
        "precios",
        "sueldo",
        "banco",
        "crédito",
        "mercado",
    ],
    &[
        "minería",
        "cobre",
        "faena",
        "sindicato",
        "huelga",
        "empresa",
        "trabajadores",
        "bono",
    ],
    &[
        "terremoto",
        "sismo",
        "réplica",
        "magnitud",
        "costa",
        "tsunami",
        "daños",
        "viviendas",
    ],
];

const CHATTER: [&str; 24] = [
    "bueno", "nada", "siempre", "nunca", "igual", "cosa", "gente", "país", "verdad", "mejor", "peor", "todos", "nadie",
    "otra", "vez", "mismo", "dicen", "creo", "parece", "claro", "puro", "cuento", "típico", "pregunta",
];

const GLUE: [&str; 12] = [
    "el", "la", "los", "que", "de", "en", "y", "con", "por", "se", "es", "muy",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_threads: usize,
    pub min_comments: usize,
    pub max_comments: usize,
    /// Comments per thread that are on topic and well liked.
    pub on_topic: usize,
    /// Sprinkle markup, links, mentions, laughter and short replies that
    /// preprocessing should remove.
    pub noise: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_threads: 200,
            min_comments: 5,
            max_comments: 8,
            on_topic: 2,
            noise: false,
            seed: 7,
        }
    }
}

fn sentence(rng: &mut ChaCha8Rng, content: &[&str], n_content: usize) -> Vec<String> {
    let mut words: Vec<String> = content
        .choose_multiple(rng, n_content.min(content.len()))
        .map(|w| w.to_string())
        .collect();
    for _ in 0..2 {
        let at = rng.random_range(0..=words.len());
        words.insert(at, GLUE.choose(rng).unwrap().to_string());
    }
    words
}

fn add_noise(rng: &mut ChaCha8Rng, mut words: Vec<String>) -> String {
    match rng.random_range(0..6) {
        0 => words.push("jajaja".into()),
        1 => words.push("http://noticias.example/nota".into()),
        2 => words.insert(0, "@vecino".into()),
        3 => {
            let w = words.pop().unwrap_or_default();
            words.push(format!("<b>{w}</b>!!!"));
        }
        _ => {}
    }
    words.join(" ")
}

pub fn generate(cfg: &SyntheticConfig) -> Vec<RawThread> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.n_threads)
        .map(|t| {
            let topic = TOPICS[rng.random_range(0..TOPICS.len())];
            let title = sentence(&mut rng, topic, 4).join(" ");
            let n = rng.random_range(cfg.min_comments..=cfg.max_comments.max(cfg.min_comments));
            let on_topic = cfg.on_topic.min(n);
            let mut comments: Vec<RawComment> = (0..n)
                .map(|i| {
                    let (words, likes) = if i < on_topic {
                        (sentence(&mut rng, topic, 4), rng.random_range(20..=100))
                    } else {
                        (sentence(&mut rng, &CHATTER, 4), rng.random_range(0..=3))
                    };
                    let text = if cfg.noise {
                        add_noise(&mut rng, words)
                    } else {
                        words.join(" ")
                    };
                    RawComment {
                        text,
                        likes,
                        author_hash: None,
                    }
                })
                .collect();
            if cfg.noise {
                comments.push(RawComment {
                    text: "jajaja sí".into(),
                    likes: rng.random_range(0..=5),
                    author_hash: None,
                });
            }
            comments.shuffle(&mut rng);
            RawThread {
                id: format!("syn-{t:04}"),
                title,
                comments,
            }
        })
        .collect()
}
