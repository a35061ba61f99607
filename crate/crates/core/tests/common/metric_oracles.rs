//! Brute-force reference implementations of the caption metrics, written
//! from the metric definitions without sharing code with the library.

use reportgen::metrics::EvalPair;

pub fn words(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in s.to_lowercase().chars() {
        if c.is_alphanumeric() {
            cur.push(c);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn grams(t: &[String], n: usize) -> Vec<String> {
    if t.len() < n {
        return vec![];
    }
    (0..=t.len() - n).map(|i| t[i..i + n].join(" ")).collect()
}

pub fn occurrences(list: &[String], g: &str) -> usize {
    list.iter().filter(|x| *x == g).count()
}

pub fn oracle_bleu(pairs: &[EvalPair], n: usize) -> f64 {
    let mut logs = 0.0;
    let (mut c_total, mut r_total) = (0usize, 0usize);
    for k in 1..=n {
        let (mut hit, mut all) = (0usize, 0usize);
        for p in pairs {
            let cand = grams(&words(&p.candidate), k);
            all += cand.len();
            let mut uniq = cand.clone();
            uniq.sort();
            uniq.dedup();
            for g in &uniq {
                let best = p.references.iter().map(|r| occurrences(&grams(&words(r), k), g)).max().unwrap();
                hit += occurrences(&cand, g).min(best);
            }
        }
        if hit == 0 {
            return 0.0;
        }
        logs += (hit as f64 / all as f64).ln() / n as f64;
    }
    for p in pairs {
        let c = words(&p.candidate).len();
        c_total += c;
        let mut lens: Vec<usize> = p.references.iter().map(|r| words(r).len()).collect();
        lens.sort();
        let mut best = lens[0];
        for &l in &lens {
            if (l as i64 - c as i64).abs() < (best as i64 - c as i64).abs() {
                best = l;
            }
        }
        r_total += best;
    }
    let bp = if c_total > r_total { 1.0 } else { (1.0 - r_total as f64 / c_total as f64).exp() };
    bp * logs.exp()
}

pub fn oracle_lcs(a: &[String], b: &[String]) -> usize {
    let mut table = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in (0..a.len()).rev() {
        for j in (0..b.len()).rev() {
            table[i][j] = if a[i] == b[j] { 1 + table[i + 1][j + 1] } else { table[i + 1][j].max(table[i][j + 1]) };
        }
    }
    table[0][0]
}

pub fn oracle_rouge(pairs: &[EvalPair]) -> f64 {
    let beta2 = 1.2;
    let mut total = 0.0;
    for p in pairs {
        let c = words(&p.candidate);
        let mut best: f64 = 0.0;
        for r in &p.references {
            let r = words(r);
            let l = oracle_lcs(&c, &r) as f64;
            if l > 0.0 {
                let (prec, rec) = (l / c.len() as f64, l / r.len() as f64);
                best = best.max((1.0 + beta2) * prec * rec / (rec + beta2 * prec));
            }
        }
        total += best;
    }
    total / pairs.len() as f64
}

/// Dense TF-IDF vectors over the global n-gram list.
pub fn oracle_cider(pairs: &[EvalPair]) -> f64 {
    let mut vocab: Vec<String> = Vec::new();
    for p in pairs {
        for text in std::iter::once(&p.candidate).chain(&p.references) {
            for n in 1..=4 {
                vocab.extend(grams(&words(text), n));
            }
        }
    }
    vocab.sort();
    vocab.dedup();
    let order = |g: &str| g.split(' ').count();
    let df: Vec<f64> = vocab
        .iter()
        .map(|g| {
            pairs
                .iter()
                .filter(|p| p.references.iter().any(|r| grams(&words(r), order(g)).contains(g)))
                .count() as f64
        })
        .collect();
    let big_n = (pairs.len() as f64).ln();
    let vector = |text: &str, n: usize| -> Vec<f64> {
        let g = grams(&words(text), n);
        vocab
            .iter()
            .zip(&df)
            .map(|(v, d)| if order(v) == n { occurrences(&g, v) as f64 * (big_n - d.max(1.0).ln()) } else { 0.0 })
            .collect()
    };
    let bigrams = |text: &str| grams(&words(text), 2).len() as f64;
    let mut total = 0.0;
    for p in pairs {
        let mut per_ref = 0.0;
        for r in &p.references {
            let delta = bigrams(&p.candidate) - bigrams(r);
            let pen = (-delta * delta / 72.0).exp();
            let mut s = 0.0;
            for n in 1..=4 {
                let (h, rv) = (vector(&p.candidate, n), vector(r, n));
                let dot: f64 = h.iter().zip(&rv).map(|(a, b)| a.min(*b) * b).sum();
                let nh = h.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nr = rv.iter().map(|x| x * x).sum::<f64>().sqrt();
                let val = if nh > 0.0 && nr > 0.0 { dot / (nh * nr) } else { dot };
                s += val * pen;
            }
            per_ref += s / 4.0;
        }
        total += per_ref / p.references.len() as f64 * 10.0;
    }
    total / pairs.len() as f64
}

/// Hand-built corpora covering clipping, brevity, reordering and multi-reference cases.
pub fn cases() -> Vec<Vec<EvalPair>> {
    let p = EvalPair::new;
    vec![
        vec![p("the cat sat on the mat", &["the cat sat on the mat"]), p("a dog ran", &["a dog ran fast"])],
        vec![p("the the the the", &["the cat"]), p("moderate cardiomegaly .", &["the heart is enlarged ."])],
        vec![p("the cat", &["the cat sat down"]), p("no acute process", &["no acute cardiopulmonary process ."])],
        vec![
            p("small left pleural effusion .", &["there is a small left pleural effusion .", "left effusion ."]),
            p("mild edema .", &["mild pulmonary edema .", "edema is mild ."]),
            p("heart size is normal .", &["heart size normal .", "normal heart size ."]),
        ],
        vec![p("a b c d", &["a c d e"]), p("x y z", &["z y x"]), p("a a b b", &["a b a b", "b b a a"])],
        vec![
            p("there is moderate cardiomegaly .", &["moderate cardiomegaly is present ."]),
            p("bibasilar atelectasis .", &["bibasilar atelectasis is seen ."]),
            p("focal consolidation in the right lower lobe .", &["right lower lobe consolidation ."]),
            p("no acute cardiopulmonary process .", &["no acute cardiopulmonary process ."]),
        ],
        vec![p("one two three four five", &["one two three four five six"]), p("six seven", &["eight nine ten"])],
        vec![p("Mixed CASE, Punctuation!", &["mixed case , punctuation !"]), p("q r s t", &["q r s t u v"])],
        vec![p("long candidate with many many words here now", &["short ref"]), p("short ref", &["long candidate"])],
        vec![
            p("a b a b a b", &["a b", "b a b a b a"]),
            p("c d e f g", &["c d e", "f g c d e"]),
            p("h", &["h i j k l m"]),
        ],
        vec![p("effusion", &["effusion ."]), p("edema", &["edema ."]), p("atelectasis", &["atelectasis ."])],
    ]
}

