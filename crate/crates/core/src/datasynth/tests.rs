use std::collections::HashMap;

use super::vocab::{self, TokenId};
use super::*;

/// Reads a cell's colour and shape straight from the raster pixels.
fn read_cell(px: &[[f64; 3]], grid: usize, row: usize, col: usize) -> Option<(&'static str, &'static str)> {
    let size = RASTER / grid;
    let mut lit = 0;
    let mut rgb = [0.0; 3];
    let mut top_row_lit = 0;
    for y in 0..size {
        for x in 0..size {
            let p = px[(row * size + y) * RASTER + col * size + x];
            if p.iter().any(|&v| v > 0.0) {
                lit += 1;
                rgb = p;
                if y == 1 {
                    top_row_lit += 1;
                }
            }
        }
    }
    if lit == 0 {
        return None;
    }
    let colour = match rgb {
        [1.0, 0.0, 0.0] => "red",
        [0.0, 1.0, 0.0] => "green",
        [0.0, 0.0, 1.0] => "blue",
        [1.0, 1.0, 0.0] => "yellow",
        [0.0, 1.0, 1.0] => "cyan",
        [1.0, 0.0, 1.0] => "magenta",
        [1.0, 1.0, 1.0] => "white",
        [1.0, 0.5, 0.0] => "orange",
        _ => panic!("unknown colour {rgb:?}"),
    };
    // square fills its second pixel row completely; the triangle's apex is
    // narrow there; the circle is in between
    let shape = match top_row_lit {
        6 => "square",
        0..=2 => "triangle",
        _ => "circle",
    };
    Some((colour, shape))
}

/// Independent reader: parses the question tokens and looks at pixels.
fn rule_reader(image: &SynthImage, question: &[TokenId]) -> Option<Vec<TokenId>> {
    let words: Vec<&str> = question.iter().map(|&t| vocab::word(t)).collect();
    let nums: Vec<usize> = words.iter().filter_map(|w| w.parse().ok()).collect();
    let (row, col) = (nums[0], nums[1]);
    let px = image.rasterize().unwrap();
    let (c, s) = read_cell(&px, image.grid, row, col)?;
    let ans = if words.contains(&"color") {
        vec![c]
    } else if words.contains(&"shape") {
        vec![s]
    } else {
        vec![c, s]
    };
    Some(ans.into_iter().map(vocab::id).collect())
}

fn small_world() -> World {
    gen_world(11, WorldCounts { facts: 200, text_facts: 40, probe: 32 }).unwrap()
}

#[test]
fn vocabulary_fits_and_round_trips() {
    assert_eq!(vocab::word(vocab::EOA), "<eoa>");
    let q = vocab::tokenize("what color is at row 1 col 2 ?");
    assert_eq!(vocab::detokenize(&q), "what color is at row 1 col 2 ?");
    assert!(q.iter().all(|&t| (t as usize) < vocab::VOCAB_SIZE));
}

#[test]
fn every_template_family_has_four_forms() {
    for k in QuestionKind::VISUAL.into_iter().chain(QuestionKind::TEXTUAL) {
        assert!(k.forms().len() >= 4, "{k:?}");
    }
}

#[test]
fn image_validation() {
    let cell = |row, col| Cell { row, col, color: Color::Red, shape: Shape::Circle };
    assert!(SynthImage::new(4, vec![cell(0, 0), cell(3, 3)]).is_ok());
    assert!(SynthImage::new(4, vec![cell(0, 0), cell(0, 0)]).is_err());
    assert!(SynthImage::new(4, vec![cell(4, 0)]).is_err());
    assert!(SynthImage::new(5, vec![]).is_err());
}

#[test]
fn world_is_deterministic() {
    assert_eq!(small_world(), small_world());
    let other = gen_world(12, WorldCounts { facts: 200, text_facts: 40, probe: 32 }).unwrap();
    assert_ne!(small_world(), other);
}

#[test]
fn zero_facts_is_an_error() {
    let err = gen_world(1, WorldCounts { facts: 0, text_facts: 4, probe: 1 }).unwrap_err();
    assert!(matches!(err, crate::Error::Dataset(_)));
}

#[test]
fn every_answer_matches_the_rule_reader() {
    let world = small_world();
    assert_eq!(world.image_facts().count(), 200);
    for f in world.image_facts() {
        let img = f.image.as_ref().unwrap();
        assert_eq!(rule_reader(img, &f.question).as_ref(), Some(&f.answer), "{}", f.id);
        assert!(f.answer.len() <= 4);
    }
    // text facts: consistent attribute per (entity, relation)
    let mut seen: HashMap<Vec<TokenId>, Vec<TokenId>> = HashMap::new();
    for f in world.text_facts() {
        let tpl = f.template.as_ref().unwrap();
        let mut key = tpl.render();
        key.truncate(0);
        key.push(tpl.entity.unwrap() as TokenId);
        key.push(tpl.kind as TokenId);
        if let Some(prev) = seen.insert(key, f.answer.clone()) {
            assert_eq!(prev, f.answer);
        }
    }
}

#[test]
fn edit_cases_flip_answers_and_keep_neighbours_consistent() {
    let world = small_world();
    let cases = gen_edit_cases(&world, 5, 20).unwrap();
    assert_eq!(cases.len(), 20);
    let by_id: HashMap<&str, &Fact> = world.facts.iter().map(|f| (f.id.as_str(), f)).collect();
    for c in &cases {
        let src = by_id[c.extra["source_fact"].as_str().unwrap()];
        assert_ne!(c.edit.answer, src.answer);
        assert_eq!(rule_reader(&c.edit.image, &c.edit.question), Some(src.answer.clone()));
        assert!(c.t_gen.len() >= 3 && c.v_gen.len() >= 3 && c.t_loc.len() >= 3 && c.m_loc.len() >= 3);
        // paraphrases ask the same thing about the same image
        for n in &c.t_gen {
            assert_ne!(n.question, c.edit.question);
            assert_eq!(rule_reader(&c.edit.image, &n.question), Some(src.answer.clone()));
        }
        // jitters keep the queried cell
        for v in &c.v_gen {
            assert_ne!(v.image, c.edit.image);
            assert_eq!(rule_reader(&v.image, &c.edit.question), Some(src.answer.clone()));
        }
        let kind = src.template.as_ref().unwrap().kind;
        for m in &c.m_loc {
            let other = world.facts.iter().find(|f| f.question == m.question && f.image.as_ref() == Some(&m.image)).unwrap();
            assert_ne!(other.template.as_ref().unwrap().kind, kind);
            assert_ne!(m.question, c.edit.question);
        }
        for t in &c.t_loc {
            assert_ne!(t.question, c.edit.question);
        }
    }
}

#[test]
fn edit_cases_need_a_large_enough_world() {
    let world = gen_world(3, WorldCounts { facts: 5, text_facts: 2, probe: 1 }).unwrap();
    assert!(gen_edit_cases(&world, 0, 3).is_err());
    assert!(gen_edit_cases(&world, 0, 50).is_err());
}

#[test]
fn jsonl_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let world = small_world();
    let cases = gen_edit_cases(&world, 5, 4).unwrap();
    let p = dir.path().join("cases.jsonl");
    write_jsonl(&p, &cases).unwrap();
    let back: Vec<EditCase> = read_jsonl(&p).unwrap();
    assert_eq!(back, cases);
    let pf = dir.path().join("facts.jsonl");
    write_jsonl(&pf, &world.facts).unwrap();
    assert_eq!(read_jsonl::<Fact>(&pf).unwrap(), world.facts);

    // missing field → schema error naming the field and line
    std::fs::write(&pf, "{\"id\":\"a\",\"question\":[3],\"answer\":[4]}\n{\"id\":\"b\",\"question\":[3]}\n").unwrap();
    match read_jsonl::<Fact>(&pf) {
        Err(crate::Error::Schema { line, message }) => {
            assert_eq!(line, 2);
            assert!(message.contains("answer"), "{message}");
        }
        other => panic!("{other:?}"),
    }
    std::fs::write(&pf, "not json\n").unwrap();
    assert!(matches!(read_jsonl::<Fact>(&pf), Err(crate::Error::Schema { line: 1, .. })));

    // unknown fields survive a round trip
    std::fs::write(&pf, "{\"id\":\"a\",\"question\":[3],\"answer\":[4],\"source\":\"manual\"}\n").unwrap();
    let facts: Vec<Fact> = read_jsonl(&pf).unwrap();
    assert_eq!(facts[0].extra["source"], "manual");
    write_jsonl(&pf, &facts).unwrap();
    assert!(std::fs::read_to_string(&pf).unwrap().contains("\"source\":\"manual\""));
}
