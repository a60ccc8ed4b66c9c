use super::{random_split, Dataset, Inputs, Targets};
use crate::error::{Error, Result};

/// Every ordered pair `(a, b)` with label `(a + b) mod p`.
pub fn gen_modadd(p: usize, train_frac: f64, seed: u64) -> Result<Dataset> {
    if p < 2 {
        return Err(Error::invalid(format!("modulus must be >= 2, got {p}")));
    }
    let mut ids = Vec::with_capacity(2 * p * p);
    let mut labels = Vec::with_capacity(p * p);
    for a in 0..p {
        for b in 0..p {
            ids.extend([a, b]);
            labels.push((a + b) % p);
        }
    }
    let (train, test) = random_split(p * p, train_frac, seed)?;
    Ok(Dataset {
        name: format!("mod_add_{p}"),
        inputs: Inputs::Tokens { ids, per_sample: 2 },
        targets: Targets::Classes { labels, n_classes: p },
        train,
        test,
    })
}

/// The 24 permutations of `(0, 1, 2, 3)` in lexicographic order.
pub fn s4_elements() -> Vec<[usize; 4]> {
    let mut out = Vec::with_capacity(24);
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                for d in 0..4 {
                    let p = [a, b, c, d];
                    if (0..4).all(|v| p.contains(&v)) {
                        out.push(p);
                    }
                }
            }
        }
    }
    out
}

/// `a ∘ b`: apply `b`, then `a`.
pub fn compose(a: &[usize; 4], b: &[usize; 4]) -> [usize; 4] {
    [a[b[0]], a[b[1]], a[b[2]], a[b[3]]]
}

/// `+1` for even permutations, `-1` for odd, from the cycle structure.
pub fn parity(p: &[usize; 4]) -> i32 {
    let mut seen = [false; 4];
    let mut sign = 1;
    for start in 0..4 {
        if seen[start] {
            continue;
        }
        let mut len = 0;
        let mut i = start;
        while !seen[i] {
            seen[i] = true;
            i = p[i];
            len += 1;
        }
        if len % 2 == 0 {
            sign = -sign;
        }
    }
    sign
}

/// All 576 ordered pairs of S4 elements labelled by their composition.
pub fn gen_s4(train_frac: f64, seed: u64) -> Result<Dataset> {
    let elems = s4_elements();
    let mut ids = Vec::with_capacity(2 * 576);
    let mut labels = Vec::with_capacity(576);
    for (i, a) in elems.iter().enumerate() {
        for (j, b) in elems.iter().enumerate() {
            let c = compose(a, b);
            ids.extend([i, j]);
            labels.push(elems.iter().position(|e| *e == c).expect("S4 is closed"));
        }
    }
    let (train, test) = random_split(576, train_frac, seed)?;
    Ok(Dataset {
        name: "s4".into(),
        inputs: Inputs::Tokens { ids, per_sample: 2 },
        targets: Targets::Classes { labels, n_classes: 24 },
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn token_pairs(ds: &Dataset) -> Vec<(usize, usize, usize)> {
        let (Inputs::Tokens { ids, .. }, Targets::Classes { labels, .. }) = (&ds.inputs, &ds.targets) else {
            panic!()
        };
        labels.iter().enumerate().map(|(i, &l)| (ids[2 * i], ids[2 * i + 1], l)).collect()
    }

    #[test]
    fn modadd_counts() {
        let ds = gen_modadd(59, 0.8, 0).unwrap();
        assert_eq!(ds.len(), 3481);
        assert_eq!(ds.train.len(), 2784);
        let rows = token_pairs(&ds);
        assert!(rows.contains(&(58, 1, 0)));
        let mut hist = vec![0; 59];
        for &(_, _, l) in &rows {
            hist[l] += 1;
        }
        assert!(hist.iter().all(|&h| h == 59));
        let mut pairs: Vec<_> = rows.iter().map(|&(a, b, _)| (a, b)).collect();
        pairs.sort_unstable();
        pairs.dedup();
        assert_eq!(pairs.len(), 3481);
        assert!(gen_modadd(1, 0.8, 0).is_err());
    }

    #[test]
    fn s4_table_is_a_group() {
        let elems = s4_elements();
        assert_eq!(elems.len(), 24);
        assert_eq!(elems[0], [0, 1, 2, 3]);
        assert!(elems.windows(2).all(|w| w[0] < w[1]));
        let ds = gen_s4(0.8, 1).unwrap();
        let rows = token_pairs(&ds);
        assert_eq!(rows.len(), 576);
        assert_eq!(ds.train.len(), 460);
        let mut table = [[usize::MAX; 24]; 24];
        for &(a, b, c) in &rows {
            table[a][b] = c;
        }
        assert_eq!(table[0][0], 0);
        for i in 0..24 {
            let mut row: Vec<usize> = table[i].to_vec();
            let mut col: Vec<usize> = (0..24).map(|j| table[j][i]).collect();
            row.sort_unstable();
            col.sort_unstable();
            assert_eq!(row, (0..24).collect::<Vec<_>>());
            assert_eq!(col, (0..24).collect::<Vec<_>>());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (a, b, c) = (rng.random_range(0..24), rng.random_range(0..24), rng.random_range(0..24));
            assert_eq!(table[table[a][b]][c], table[a][table[b][c]]);
        }
        // b first, then a: swapping 0,1 then cycling 0->1->2->3->0
        let swap01 = [1, 0, 2, 3];
        let cycle = [1, 2, 3, 0];
        assert_eq!(compose(&cycle, &swap01), [2, 1, 3, 0]);
    }

    #[test]
    fn parity_from_cycles() {
        let elems = s4_elements();
        assert_eq!(elems.iter().filter(|p| parity(p) == 1).count(), 12);
        assert_eq!(parity(&[1, 0, 2, 3]), -1);
        assert_eq!(parity(&[1, 2, 3, 0]), -1);
        assert_eq!(parity(&[1, 2, 0, 3]), 1);
        for a in &elems {
            for b in &elems {
                assert_eq!(parity(&compose(a, b)), parity(a) * parity(b));
            }
        }
    }
}
