//! Text summary of a weight fit in the layout of R's `summary.lm` printout,
//! including R's joint number formatting rules.

use crate::dlm::DlmFit;
use crate::stats;

/// Significant digits used by the printout (R's `getOption("digits") - 3`).
const DIGITS: usize = 4;
const LINE_WIDTH: usize = 80;
const SIGNIF_LEGEND: &str = "Signif. codes:  0 ‘***’ 0.001 ‘**’ 0.01 ‘*’ 0.05 ‘.’ 0.1 ‘ ’ 1";

/// Sign, decimal exponent and number of significant digits of `x` shown with `digits`.
fn sci_parts(x: f64, digits: usize) -> (bool, i32, usize) {
    if x == 0.0 {
        return (false, 0, 1);
    }
    let s = format!("{:.*e}", digits.saturating_sub(1), x.abs());
    let (mant, exp) = s.split_once('e').unwrap();
    let kp: i32 = exp.parse().unwrap();
    let sig = mant.replace('.', "");
    let nsig = sig.trim_end_matches('0').len().max(1);
    (x < 0.0, kp, nsig)
}

/// Common layout for a numeric vector: width, decimals, and whether scientific.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RealFormat {
    pub width: usize,
    pub decimals: usize,
    /// Exponent digits minus one when scientific; `None` for fixed notation.
    pub exponent: Option<usize>,
}

/// R's `formatReal`: choose fixed notation unless scientific is narrower.
pub fn format_real_layout(xs: &[f64], digits: usize) -> RealFormat {
    let mut neg = false;
    let (mut mxl, mut rgt, mut mxsl, mut mxns) = (i32::MIN, i32::MIN, i32::MIN, i32::MIN);
    let (mut mxe, mut mne) = (i32::MIN, i32::MAX);
    let mut special = 0usize;
    for &x in xs {
        if !x.is_finite() {
            special = special.max(if x.is_nan() || x > 0.0 { 3 } else { 4 });
            continue;
        }
        let (n, kp, nsig) = sci_parts(x, digits);
        let left = kp + 1;
        let sleft = n as i32 + if left <= 0 { 1 } else { left };
        let right = nsig as i32 - left;
        neg |= n;
        rgt = rgt.max(right);
        mxl = mxl.max(left);
        mxsl = mxsl.max(sleft);
        mxns = mxns.max(nsig as i32);
        mxe = mxe.max(kp);
        mne = mne.min(kp);
    }
    if mxns == i32::MIN {
        return RealFormat { width: special, decimals: 0, exponent: None };
    }
    if mxl < 0 {
        mxsl = 1 + neg as i32;
    }
    let rgt = rgt.max(0);
    let w_fixed = mxsl + rgt + (rgt != 0) as i32;
    let e = if mxe >= 100 || mne <= -99 { 2 } else { 1 };
    let d = mxns - 1;
    let w_sci = neg as i32 + (d > 0) as i32 + d + 4 + e;
    let layout = if w_fixed <= w_sci {
        RealFormat { width: w_fixed as usize, decimals: rgt as usize, exponent: None }
    } else {
        RealFormat { width: w_sci as usize, decimals: d as usize, exponent: Some(e as usize) }
    };
    RealFormat { width: layout.width.max(special), ..layout }
}

pub fn encode_real(x: f64, f: RealFormat) -> String {
    let body = if x.is_nan() {
        "NaN".to_string()
    } else if x.is_infinite() {
        if x > 0.0 { "Inf".into() } else { "-Inf".into() }
    } else {
        match f.exponent {
            None => format!("{:.*}", f.decimals, x),
            Some(e) => sci_string(x, f.decimals, e + 1),
        }
    };
    format!("{body:>w$}", w = f.width)
}

fn sci_string(x: f64, decimals: usize, exp_digits: usize) -> String {
    let s = format!("{:.*e}", decimals, x);
    let (mant, exp) = s.split_once('e').unwrap();
    let kp: i32 = exp.parse().unwrap();
    let sign = if kp < 0 { '-' } else { '+' };
    format!("{mant}e{sign}{:0w$}", kp.abs(), w = exp_digits)
}

/// R's `format(x, digits = d)` on a vector: common width and notation.
pub fn format_real(xs: &[f64], digits: usize) -> Vec<String> {
    let f = format_real_layout(xs, digits);
    xs.iter().map(|&x| encode_real(x, f)).collect()
}

/// R's `round(x, digits)`.
pub fn round_to(x: f64, decimals: i32) -> f64 {
    let p = 10f64.powi(decimals);
    let y = (x * p).round() / p;
    if y.is_finite() { y } else { x }
}

/// R's `signif(x, digits)`.
pub fn signif(x: f64, digits: usize) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let kp = x.abs().log10().floor() as i32;
    round_to(x, digits as i32 - 1 - kp)
}

/// C's `%.{digits}g`, as used by R's `formatC`.
pub fn format_g(x: f64, digits: usize) -> String {
    if !x.is_finite() {
        return if x.is_nan() { "NaN".into() } else if x > 0.0 { "Inf".into() } else { "-Inf".into() };
    }
    let p = digits.max(1);
    if x == 0.0 {
        return "0".into();
    }
    let s = format!("{:.*e}", p - 1, x);
    let (_, exp) = s.split_once('e').unwrap();
    let kp: i32 = exp.parse().unwrap();
    if kp < -4 || kp >= p as i32 {
        let s = sci_string(x, p - 1, 2);
        let (mant, exp) = s.split_once('e').unwrap();
        format!("{}e{exp}", strip_zeros(mant))
    } else {
        strip_zeros(&format!("{:.*}", (p as i32 - 1 - kp) as usize, x)).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// R's `format.pval` with machine-epsilon cutoff.
pub fn format_pval(pv: &[f64], digits: usize) -> Vec<String> {
    let eps = f64::EPSILON;
    let mut out = vec![String::new(); pv.len()];
    let fixed: Vec<usize> = (0..pv.len())
        .filter(|&i| pv[i].is_nan() || (pv[i] >= eps && (pv[i].log10().floor() >= -3.0)))
        .collect();
    let sci: Vec<usize> = (0..pv.len())
        .filter(|&i| !pv[i].is_nan() && pv[i] >= eps && pv[i].log10().floor() < -3.0)
        .collect();
    for group in [&fixed, &sci] {
        let vals: Vec<f64> = group.iter().map(|&i| pv[i]).collect();
        for (&i, s) in group.iter().zip(format_real(&vals, digits)) {
            out[i] = if pv[i].is_nan() { "NA".into() } else { s };
        }
    }
    let tiny: Vec<usize> = (0..pv.len()).filter(|&i| pv[i] < eps).collect();
    if !tiny.is_empty() {
        let mut d = digits.saturating_sub(2).max(1);
        let sep = if fixed.len() + sci.len() > 0 {
            let nc = out.iter().map(|s| s.chars().count()).max().unwrap_or(0);
            if d > 1 && d + 6 > nc {
                d = nc.saturating_sub(7).max(1);
            }
            if d == 1 && nc <= 6 { "" } else { " " }
        } else if d == 1 {
            ""
        } else {
            " "
        };
        let e = format_real(&[eps], d).pop().unwrap();
        for i in tiny {
            out[i] = format!("<{sep}{}", e.trim());
        }
    }
    out
}

pub fn significance_code(p: f64) -> &'static str {
    if p.is_nan() {
        ""
    } else if p <= 0.001 {
        "***"
    } else if p <= 0.01 {
        "**"
    } else if p <= 0.05 {
        "*"
    } else if p <= 0.1 {
        "."
    } else {
        " "
    }
}

/// R's named-vector print: entries right-aligned to a common width, each
/// followed by one space, wrapped at 80 columns.
pub fn named_vector(names: &[String], values: &[String]) -> String {
    let w = names
        .iter()
        .chain(values)
        .map(|s| s.chars().count())
        .max()
        .unwrap_or(0);
    let per_line = (LINE_WIDTH / (w + 1)).max(1);
    let mut out = String::new();
    for (ns, vs) in names.chunks(per_line).zip(values.chunks(per_line)) {
        for n in ns {
            out.push_str(&format!("{n:>w$} "));
        }
        out.push('\n');
        for v in vs {
            out.push_str(&format!("{v:>w$} "));
        }
        out.push('\n');
    }
    out
}

/// R's `zapsmall(x, digits)`.
fn zapsmall(xs: &[f64], digits: i32) -> Vec<f64> {
    let mx = xs.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let d = if mx > 0.0 { (digits - mx.log10().ceil() as i32).max(0) } else { digits };
    xs.iter().map(|&x| round_to(x, d)).collect()
}

fn residual_block(fit: &DlmFit) -> String {
    let r = fit.residuals.as_slice();
    if fit.df > 5 {
        let sorted = stats::sorted_copy(r);
        let q: Vec<f64> = [0.0, 0.25, 0.5, 0.75, 1.0]
            .iter()
            .map(|&p| stats::quantile_sorted(&sorted, p))
            .collect();
        let q = zapsmall(&q, DIGITS as i32 + 1);
        let names: Vec<String> = ["Min", "1Q", "Median", "3Q", "Max"].iter().map(|s| s.to_string()).collect();
        named_vector(&names, &format_real(&q, DIGITS))
    } else {
        named_vector(&fit.function_names, &format_real(r, DIGITS))
    }
}

/// The coefficient table rows as R's `printCoefmat` would print them.
pub fn coefficient_table(
    names: &[String],
    estimate: &[f64],
    se: &[f64],
    t: &[f64],
    p: &[f64],
) -> String {
    let n = names.len();
    let acs: Vec<f64> = estimate
        .iter()
        .chain(se)
        .map(|x| x.abs())
        .filter(|x| x.is_finite() && *x != 0.0)
        .collect();
    let decimals = if acs.is_empty() {
        1
    } else {
        let lo = acs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = acs.iter().cloned().fold(0.0, f64::max);
        let dmin = |v: f64| 1 + v.log10().floor() as i32;
        (DIGITS as i32 - dmin(lo)).max(DIGITS as i32 - dmin(hi)).max(1)
    };
    let cs: Vec<f64> = estimate.iter().chain(se).map(|&x| round_to(x, decimals)).collect();
    let cs = format_real(&cs, DIGITS);
    let dig_tst = (DIGITS - 1).clamp(1, 5);
    let tv: Vec<f64> = t.iter().map(|&x| round_to(x, dig_tst as i32)).collect();
    let tv = format_real(&tv, DIGITS);
    let pv = format_pval(p, dig_tst);
    let stars = p.iter().any(|&x| x < 0.1);

    let headers = ["Estimate", "Std. Error", "t value", "Pr(>|t|)"];
    let mut columns: Vec<Vec<String>> = vec![
        cs[..n].to_vec(),
        cs[n..].to_vec(),
        tv,
        pv,
    ];
    let mut widths: Vec<usize> = columns
        .iter()
        .zip(headers)
        .map(|(c, h)| c.iter().map(|s| s.chars().count()).chain([h.len()]).max().unwrap())
        .collect();
    let codes: Vec<&str> = p.iter().map(|&x| significance_code(x)).collect();
    let code_width = codes.iter().map(|c| c.len()).max().unwrap_or(0);
    if stars {
        columns.push(codes.iter().map(|c| format!("{c:<code_width$}")).collect());
        widths.push(code_width);
    }
    let name_w = names.iter().map(|s| s.chars().count()).max().unwrap_or(0);
    let mut out = format!("{:name_w$}", "");
    for (i, h) in headers.iter().enumerate() {
        out.push_str(&format!(" {h:>w$}", w = widths[i]));
    }
    if stars {
        out.push_str(&format!(" {:w$}", "", w = code_width));
    }
    out.push('\n');
    for r in 0..n {
        out.push_str(&format!("{:<name_w$}", names[r]));
        for (c, col) in columns.iter().enumerate() {
            out.push_str(&format!(" {:>w$}", col[r], w = widths[c]));
        }
        out.push('\n');
    }
    if stars {
        out.push_str("---\n");
        out.push_str(SIGNIF_LEGEND);
        out.push('\n');
    }
    out
}

/// A model-formula style call line naming target and sources.
pub fn default_call(fit: &DlmFit) -> String {
    format!(
        "fit_weights(formula = {} ~ {}, mode = {}, whitening = {})",
        fit.target_name,
        fit.dataset_names.join(" + "),
        match fit.mode {
            crate::dlm::FitMode::SumToOne => "sum_to_one",
            crate::dlm::FitMode::Simplex => "simplex",
        },
        fit.whitening
    )
}

/// Full text report.
pub fn summarize(fit: &DlmFit, call: &str) -> String {
    let mut out = String::new();
    out.push_str("Call:\n");
    out.push_str(call);
    out.push_str("\n\nResiduals:\n");
    out.push_str(&residual_block(fit));
    out.push_str("\nCoefficients:\n");
    out.push_str(&coefficient_table(
        &fit.dataset_names,
        fit.beta_hat.as_slice(),
        fit.se.as_slice(),
        fit.t_stats.as_slice(),
        fit.p_values.as_slice(),
    ));
    out.push('\n');
    out.push_str(&format!(
        "Residual standard error: {} on {} degrees of freedom\n",
        format_real(&[signif(fit.sigma2_hat.sqrt(), DIGITS)], 7)[0],
        fit.df
    ));
    if fit.k() > 1 {
        out.push_str(&format!(
            "Multiple R-squared:  {},\tAdjusted R-squared:  {} \n",
            format_g(fit.r_squared, DIGITS),
            format_g(fit.adj_r_squared, DIGITS)
        ));
        out.push_str(&format!(
            "F-statistic: {} on {} and {} DF,  p-value: {}\n",
            format_g(fit.f_stat, DIGITS),
            fit.f_df1,
            fit.df,
            format_pval(&[fit.f_pvalue], DIGITS)[0]
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn joint_fixed_format() {
        assert_eq!(format_real(&[0.9966, 0.0655], 3), s(&["0.9966", "0.0655"]));
        assert_eq!(format_real(&[-0.004, 1.844, 42.567, 7.795], 4), s(&["-0.004", " 1.844", "42.567", " 7.795"]));
        assert_eq!(format_real(&[0.1377], 7), s(&["0.1377"]));
        assert_eq!(format_real(&[1.0, 2.5], 7), s(&["1.0", "2.5"]));
        assert_eq!(format_real(&[100.0], 7), s(&["100"]));
    }

    #[test]
    fn scientific_when_narrower() {
        assert_eq!(format_real(&[1.61e-14], 3), s(&["1.61e-14"]));
        assert_eq!(format_real(&[2.220446e-16], 1), s(&["2e-16"]));
        assert_eq!(format_real(&[1e-300], 4), s(&["1e-300"]));
        assert_eq!(format_real(&[123456789.0], 4), s(&["123456789"]));
        assert_eq!(format_real(&[1234567890123.0], 4), s(&["1.235e+12"]));
    }

    #[test]
    fn pvalues() {
        assert_eq!(
            format_pval(&[0.99661, 0.06552, 1e-20, 1.6123e-14], 3),
            s(&["0.9966", "0.0655", "< 2e-16", "1.61e-14"])
        );
        assert_eq!(format_pval(&[0.0], 4), s(&["< 2.2e-16"]));
        assert_eq!(format_pval(&[0.5], 4), s(&["0.5"]));
    }

    #[test]
    fn g_format() {
        assert_eq!(format_g(0.50883, 4), "0.5088");
        assert_eq!(format_g(344.31, 4), "344.3");
        assert_eq!(format_g(0.5, 4), "0.5");
        assert_eq!(format_g(1.234e-7, 4), "1.234e-07");
        assert_eq!(format_g(123456.0, 4), "1.235e+05");
    }

    #[test]
    fn codes() {
        assert_eq!(significance_code(0.0655), ".");
        assert_eq!(significance_code(0.5), " ");
        assert_eq!(significance_code(1e-20), "***");
        assert_eq!(significance_code(0.004), "**");
        assert_eq!(significance_code(0.03), "*");
    }

    #[test]
    fn reference_coefficient_block() {
        let names = s(&[
            "Adipose_Subcutaneous",
            "Adipose_Visceral_Omentum",
            "Brain_Frontal_Cortex_BA9",
            "Brain_Cerebellum",
        ]);
        let est = [-0.0001295, 0.0462641, 0.7846112, 0.1692543];
        let se = [0.0304036, 0.0250888, 0.0184325, 0.0217128];
        let t: Vec<f64> = est.iter().zip(se).map(|(e, s)| e / s).collect();
        let p = [0.9966, 0.0655, 1e-300, 1.61e-14];
        let table = coefficient_table(&names, &est, &se, &t, &p);
        let expected = "                           Estimate Std. Error t value Pr(>|t|)    \n\
Adipose_Subcutaneous     -0.0001295  0.0304036  -0.004   0.9966    \n\
Adipose_Visceral_Omentum  0.0462641  0.0250888   1.844   0.0655 .  \n\
Brain_Frontal_Cortex_BA9  0.7846112  0.0184325  42.567  < 2e-16 ***\n\
Brain_Cerebellum          0.1692543  0.0217128   7.795 1.61e-14 ***\n\
---\n\
Signif. codes:  0 ‘***’ 0.001 ‘**’ 0.01 ‘*’ 0.05 ‘.’ 0.1 ‘ ’ 1\n";
        assert_eq!(table, expected);
    }

    #[test]
    fn reference_residual_block() {
        let names = s(&["Min", "1Q", "Median", "3Q", "Max"]);
        let q = zapsmall(&[-0.568381, -0.094362, -0.006041, 0.087391, 0.409172], 5);
        assert_eq!(
            named_vector(&names, &format_real(&q, 4)),
            "     Min       1Q   Median       3Q      Max \n-0.56838 -0.09436 -0.00604  0.08739  0.40917 \n"
        );
    }

    #[test]
    fn standard_error_line() {
        assert_eq!(format_real(&[signif(0.137712, 4)], 7)[0], "0.1377");
    }

    #[test]
    fn no_stars_without_small_pvalues() {
        let t = coefficient_table(&s(&["a", "b"]), &[0.5, 0.5], &[0.5, 0.5], &[1.0, 1.0], &[0.3, 0.3]);
        assert!(!t.contains("Signif"));
        assert!(t.lines().next().unwrap().ends_with("Pr(>|t|)"));
    }
}
