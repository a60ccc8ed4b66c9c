//! Closed-form export of small SiLU MLPs and evaluation of textual formulas.

use evalexpr::{
    build_operator_tree, ContextWithMutableFunctions, ContextWithMutableVariables, DefaultNumericTypes, EvalexprError,
    Function, HashMapContext, Node, Value,
};

use super::prune::prune;
use crate::autodiff::silu_scalar;
use crate::error::{Error, Result};
use crate::models::{Model, NetworkSpec};

/// Upper bound on `|σ'(x)|`; the maximum is about 1.0998 near x = 2.40.
pub const SILU_LIPSCHITZ: f64 = 1.1;

#[derive(Clone, Debug, PartialEq)]
enum Atom {
    Var(usize),
    Silu(Box<Affine>),
}

#[derive(Clone, Debug, PartialEq, Default)]
struct Affine {
    terms: Vec<(f64, Atom)>,
    constant: f64,
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn silu_interval(lo: f64, hi: f64) -> (f64, f64) {
    // σ decreases on (-inf, X_MIN] and increases after it.
    const X_MIN: f64 = -1.278_464_542_761_074;
    let m = silu_scalar(X_MIN);
    if hi <= X_MIN {
        (silu_scalar(hi), silu_scalar(lo))
    } else if lo >= X_MIN {
        (silu_scalar(lo), silu_scalar(hi))
    } else {
        (m, silu_scalar(lo).max(silu_scalar(hi)))
    }
}

impl Affine {
    fn var(i: usize) -> Self {
        Affine {
            terms: vec![(1.0, Atom::Var(i))],
            constant: 0.0,
        }
    }

    fn add_scaled(&mut self, c: f64, other: &Affine) {
        for (a, atom) in &other.terms {
            match self.terms.iter_mut().find(|(_, t)| t == atom) {
                Some(slot) => slot.0 += c * a,
                None => self.terms.push((c * a, atom.clone())),
            }
        }
        self.constant += c * other.constant;
    }

    fn finish(&mut self) {
        self.terms.retain(|(a, _)| *a != 0.0);
        self.terms.sort_by_key(|(_, t)| match t {
            Atom::Var(i) => (0, *i),
            Atom::Silu(_) => (1, 0),
        });
    }

    fn interval(&self, lo: f64, hi: f64) -> (f64, f64) {
        let mut out = (self.constant, self.constant);
        for (a, t) in &self.terms {
            let (tl, th) = match t {
                Atom::Var(_) => (lo, hi),
                Atom::Silu(inner) => {
                    let (il, ih) = inner.interval(lo, hi);
                    silu_interval(il, ih)
                }
            };
            let (p, q) = (a * tl, a * th);
            out.0 += p.min(q);
            out.1 += p.max(q);
        }
        out
    }

    fn eval(&self, x: &[f64], rounded: bool) -> f64 {
        let c = |v: f64| if rounded { round2(v) } else { v };
        self.terms
            .iter()
            .map(|(a, t)| c(*a) * atom_eval(t, x, rounded))
            .sum::<f64>()
            + c(self.constant)
    }

    /// Value and bound on the deviation caused by rounding every
    /// coefficient to two decimals.
    fn rounding_error(&self, x: &[f64]) -> (f64, f64) {
        let mut value = self.constant;
        let mut err = (self.constant - round2(self.constant)).abs();
        for (a, t) in &self.terms {
            let (tv, te) = match t {
                Atom::Var(i) => (x[*i], 0.0),
                Atom::Silu(inner) => {
                    let (iv, ie) = inner.rounding_error(x);
                    (silu_scalar(iv), SILU_LIPSCHITZ * ie)
                }
            };
            value += a * tv;
            err += round2(*a).abs() * te + (a - round2(*a)).abs() * tv.abs();
        }
        (value, err)
    }

    fn format(&self) -> String {
        let mut s = String::new();
        let mut push = |v: f64, body: Option<String>| {
            let r = round2(v);
            if r == 0.0 {
                return;
            }
            let num = match &body {
                Some(b) => format!("{:.2}*{b}", r.abs()),
                None => format!("{:.2}", r.abs()),
            };
            if s.is_empty() {
                if r < 0.0 {
                    s.push('-');
                }
            } else {
                s.push_str(if r < 0.0 { " - " } else { " + " });
            }
            s.push_str(&num);
        };
        for (a, t) in &self.terms {
            let body = match t {
                Atom::Var(i) => format!("x{}", i + 1),
                Atom::Silu(inner) => format!("σ({})", inner.format()),
            };
            push(*a, Some(body));
        }
        push(self.constant, None);
        if s.is_empty() {
            s.push_str("0.00");
        }
        s
    }
}

fn atom_eval(t: &Atom, x: &[f64], rounded: bool) -> f64 {
    match t {
        Atom::Var(i) => x[*i],
        Atom::Silu(inner) => silu_scalar(inner.eval(x, rounded)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExportOptions {
    pub prune_threshold: f64,
    /// Box containing every input coordinate.
    pub domain: (f64, f64),
    pub max_hidden_layers: usize,
    pub max_active_neurons: usize,
    /// Neurons whose pre-activation stays above this on the domain are
    /// written as the identity.
    pub linearize_above: f64,
}

impl Default for ExportOptions {
    fn default() -> Self {
        ExportOptions {
            prune_threshold: 1e-3,
            domain: (-1.0, 1.0),
            max_hidden_layers: 3,
            max_active_neurons: 64,
            linearize_above: 30.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExpressionExport {
    /// One formula per logical output, variables `x1..xn`.
    pub outputs: Vec<String>,
    pub active_neurons: usize,
    /// Per output, the largest deviation from the pruned network caused by
    /// writing saturated neurons as the identity.
    pub linearization_slack: Vec<f64>,
    /// The pruned network the formulas describe.
    pub pruned: Model,
    trees: Vec<Affine>,
}

impl ExpressionExport {
    /// Unrounded tree value per output.
    pub fn eval_exact(&self, x: &[f64]) -> Vec<f64> {
        self.trees.iter().map(|t| t.eval(x, false)).collect()
    }

    /// Per output, the bound on `|printed - pruned network|` at `x`.
    pub fn error_bound(&self, x: &[f64]) -> Vec<f64> {
        self.trees
            .iter()
            .zip(&self.linearization_slack)
            .map(|(t, s)| t.rounding_error(x).1 + s + 1e-9)
            .collect()
    }
}

/// Writes a pruned dense MLP as nested affine maps and σ(·).
pub fn export_expression(model: &Model, opts: &ExportOptions) -> Result<ExpressionExport> {
    let m = match &model.spec {
        NetworkSpec::Mlp(m) if m.embedding.is_none() => m,
        _ => return Err(Error::invalid("expression export needs a dense-input MLP")),
    };
    let n_layers = m.widths.len() - 1;
    if n_layers - 1 > opts.max_hidden_layers {
        return Err(Error::invalid(format!(
            "{} hidden layers exceed the export limit of {}",
            n_layers - 1,
            opts.max_hidden_layers
        )));
    }
    let (pruned, _) = prune(model, opts.prune_threshold);
    let (lo, hi) = opts.domain;
    let mut h: Vec<Affine> = model.perms[0].iter().map(|&l| Affine::var(l)).collect();
    let mut slack = vec![0.0; h.len()];
    let mut active = 0;
    for i in 1..=n_layers {
        let w = &pruned.params[2 * (i - 1)];
        let b = &pruned.params[2 * (i - 1) + 1];
        let mut next = Vec::with_capacity(w.cols());
        let mut next_slack = Vec::with_capacity(w.cols());
        for k in 0..w.cols() {
            let mut pre = Affine {
                terms: vec![],
                constant: b.get(0, k),
            };
            let mut s = 0.0;
            for j in 0..w.rows() {
                let c = w.get(j, k);
                if c != 0.0 {
                    pre.add_scaled(c, &h[j]);
                    s += c.abs() * slack[j];
                }
            }
            pre.finish();
            if i == n_layers {
                next.push(pre);
                next_slack.push(s);
                continue;
            }
            if pre.terms.is_empty() {
                next.push(Affine {
                    terms: vec![],
                    constant: silu_scalar(pre.constant),
                });
                next_slack.push(SILU_LIPSCHITZ * s);
                continue;
            }
            active += 1;
            let (plo, _) = pre.interval(lo, hi);
            if plo >= opts.linearize_above {
                let gap = if plo >= 1.2785 { silu_scalar(-plo).abs() } else { 0.2785 };
                next_slack.push(SILU_LIPSCHITZ * s + gap);
                next.push(pre);
            } else {
                next.push(Affine {
                    terms: vec![(1.0, Atom::Silu(Box::new(pre)))],
                    constant: 0.0,
                });
                next_slack.push(SILU_LIPSCHITZ * s);
            }
        }
        h = next;
        slack = next_slack;
    }
    if active > opts.max_active_neurons {
        return Err(Error::invalid(format!(
            "{active} active neurons exceed the export limit of {}",
            opts.max_active_neurons
        )));
    }
    let out_perm = &model.perms[n_layers];
    let mut trees = vec![Affine::default(); h.len()];
    let mut lin = vec![0.0; h.len()];
    for (slot, (t, s)) in h.into_iter().zip(slack).enumerate() {
        trees[out_perm[slot]] = t;
        lin[out_perm[slot]] = s;
    }
    Ok(ExpressionExport {
        outputs: trees.iter().map(Affine::format).collect(),
        active_neurons: active,
        linearization_slack: lin,
        pruned,
        trees,
    })
}

/// A parsed arithmetic formula in `x`/`x1..x9` with `σ`, `sin`, `cos`,
/// `exp`, `ln`, `sqrt`, `abs` and `pi`.
#[derive(Clone, Debug)]
pub struct Formula {
    text: String,
    tree: Node<DefaultNumericTypes>,
}

/// Appends `.0` to bare integer literals so that division stays real.
fn floatify(s: &str) -> String {
    let chars: Vec<char> = s.chars().collect();
    let mut out = String::with_capacity(s.len() + 8);
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let starts_number = c.is_ascii_digit()
            && (i == 0 || !(chars[i - 1].is_alphanumeric() || chars[i - 1] == '_' || chars[i - 1] == '.'));
        if !starts_number {
            out.push(c);
            i += 1;
            continue;
        }
        let mut j = i;
        while j < chars.len() && chars[j].is_ascii_digit() {
            j += 1;
        }
        out.extend(&chars[i..j]);
        if j >= chars.len() || !matches!(chars[j], '.' | 'e' | 'E') {
            out.push_str(".0");
        }
        i = j;
    }
    out
}

fn expr_err(e: EvalexprError<DefaultNumericTypes>) -> Error {
    Error::invalid(format!("formula: {e}"))
}

fn unary(ctx: &mut HashMapContext<DefaultNumericTypes>, name: &str, f: fn(f64) -> f64) -> Result<()> {
    ctx.set_function(
        name.into(),
        Function::new(move |a: &Value<DefaultNumericTypes>| Ok(Value::Float(f(a.as_number()?)))),
    )
    .map_err(expr_err)
}

impl Formula {
    pub fn parse(text: &str) -> Result<Self> {
        let src = floatify(&text.replace('σ', "silu"));
        let tree = build_operator_tree::<DefaultNumericTypes>(&src).map_err(expr_err)?;
        Ok(Formula {
            text: text.to_string(),
            tree,
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        let mut ctx = HashMapContext::<DefaultNumericTypes>::new();
        let fns: [(&str, fn(f64) -> f64); 7] = [
            ("silu", silu_scalar),
            ("sin", f64::sin),
            ("cos", f64::cos),
            ("exp", f64::exp),
            ("ln", f64::ln),
            ("sqrt", f64::sqrt),
            ("abs", f64::abs),
        ];
        for (name, f) in fns {
            unary(&mut ctx, name, f)?;
        }
        let mut set = |k: &str, v: f64| ctx.set_value(k.into(), Value::Float(v)).map_err(expr_err);
        set("pi", std::f64::consts::PI)?;
        if let Some(&first) = x.first() {
            set("x", first)?;
        }
        for (i, &v) in x.iter().enumerate() {
            set(&format!("x{}", i + 1), v)?;
        }
        self.tree.eval_number_with_context(&ctx).map_err(expr_err)
    }
}

/// Largest `|formula(x) - target(x)|` on 1000 evenly spaced points of
/// `[lo, hi]`, endpoints included.
pub fn silu_approx_check(formula: &Formula, target: impl Fn(f64) -> f64, lo: f64, hi: f64) -> Result<f64> {
    const N: usize = 1000;
    let mut worst = 0.0f64;
    for i in 0..N {
        let x = lo + (hi - lo) * i as f64 / (N - 1) as f64;
        worst = worst.max((formula.eval(&[x])? - target(x)).abs());
    }
    Ok(worst)
}

/// A transcribed SiLU approximation with its target and interval.
#[derive(Clone, Copy, Debug)]
pub struct SiluApprox {
    pub name: &'static str,
    pub expression: &'static str,
    pub target: &'static str,
    pub interval: (f64, f64),
}

/// The reverse-engineered formulas for the symbolic tasks.
pub fn silu_approximations() -> Vec<SiluApprox> {
    let unit = (-1.0, 1.0);
    vec![
        SiluApprox {
            name: "independence x^2",
            expression: "-1.33*x + 1.84*σ(1.53*x)",
            target: "x^2",
            interval: unit,
        },
        SiluApprox {
            name: "independence sin",
            expression: "-2.27*x + 1.72*σ(-0.91*σ(-3.24*x + 1.54) + 2.63) - 2.10",
            target: "sin(pi*x)",
            interval: unit,
        },
        SiluApprox {
            name: "independence x^3",
            expression: "2.30*σ(3.34*σ(0.90*x - 0.51) - 0.46) - 2.27*σ(3.00*σ(-0.87*x - 0.19) - 1.07)",
            target: "x^3",
            interval: unit,
        },
        SiluApprox {
            name: "feature sharing x^2",
            expression: "0.35*σ(1.41*σ(2.64*x) + 1.99*σ(-1.80*x + 0.05))",
            target: "x^2",
            interval: unit,
        },
        SiluApprox {
            name: "compositionality sqrt",
            expression: "0.80*σ(1.04*x) - 1.18*σ(-2.26*x + 2.44) - 0.18",
            target: "1.60*sqrt(x - 1.24)",
            interval: (1.24, 3.66),
        },
    ]
}
