//! Integer index bookkeeping: Riemann–Roch, the normal index, adjunction,
//! regularity criteria and the degree-`d` strata of `CP²`.

use serde::{Deserialize, Serialize};

use crate::error::{GlueError, Result};

/// One irreducible component of a nodal curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Component {
    /// Genus of the normalization.
    pub genus: i64,
    /// `⟨c1(TV), A_i⟩`.
    pub c1_pairing: i64,
    /// Number of zeros of `df_i`.
    pub df_zero_count: i64,
    /// Number of fixed points on the component.
    #[serde(default)]
    pub marked_count: i64,
}

fn default_dim() -> i64 {
    2
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodalConfiguration {
    pub components: Vec<Component>,
    /// Number of nodes.
    pub m: i64,
    /// `A_i·A_j`.
    pub intersection: Vec<Vec<i64>>,
    /// Complex dimension of the ambient manifold.
    #[serde(default = "default_dim")]
    pub n: i64,
    /// Stated `⟨c1(TV), A⟩`, checked against the component pairings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c1_total: Option<i64>,
    /// Stated arithmetic genus, checked against the genus formula.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub genus: Option<i64>,
}

impl NodalConfiguration {
    /// Single-component configuration with diagonal intersection matrix.
    pub fn irreducible(genus: i64, c1_pairing: i64, self_intersection: i64, m: i64, df_zero_count: i64) -> Self {
        NodalConfiguration {
            components: vec![Component { genus, c1_pairing, df_zero_count, marked_count: 0 }],
            m,
            intersection: vec![vec![self_intersection]],
            n: 2,
            c1_total: None,
            genus: None,
        }
    }

    pub fn r(&self) -> i64 {
        self.components.len() as i64
    }

    /// `g = Σ g̃_i + m − r + 1`.
    pub fn arithmetic_genus(&self) -> i64 {
        self.components.iter().map(|c| c.genus).sum::<i64>() + self.m - self.r() + 1
    }

    pub fn c1(&self) -> i64 {
        self.components.iter().map(|c| c.c1_pairing).sum()
    }

    /// `A·A = Σ_{i,j} A_i·A_j`.
    pub fn self_intersection(&self) -> i64 {
        self.intersection.iter().flatten().sum()
    }

    pub fn df_zeros(&self) -> i64 {
        self.components.iter().map(|c| c.df_zero_count).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(GlueError::Input("configuration has no components".into()));
        }
        if self.n < 1 {
            return Err(GlueError::Domain(format!("ambient dimension n = {} must be positive", self.n)));
        }
        if self.m < 0 {
            return Err(GlueError::Domain(format!("node count m = {} is negative", self.m)));
        }
        for (i, c) in self.components.iter().enumerate() {
            if c.genus < 0 || c.df_zero_count < 0 || c.marked_count < 0 {
                return Err(GlueError::Domain(format!("component {i} has a negative genus or count")));
            }
        }
        let r = self.components.len();
        if self.intersection.len() != r || self.intersection.iter().any(|row| row.len() != r) {
            return Err(GlueError::Consistency(format!("intersection matrix must be {r} × {r}")));
        }
        for i in 0..r {
            for j in 0..i {
                if self.intersection[i][j] != self.intersection[j][i] {
                    return Err(GlueError::Consistency(format!("intersection matrix is not symmetric at ({i}, {j})")));
                }
            }
        }
        let g = self.arithmetic_genus();
        if g < 0 {
            return Err(GlueError::Consistency(format!("arithmetic genus {g} is negative")));
        }
        if let Some(c1) = self.c1_total {
            if c1 != self.c1() {
                return Err(GlueError::Consistency(format!(
                    "stated ⟨c1, A⟩ = {c1} but the component pairings sum to {}",
                    self.c1()
                )));
            }
        }
        if let Some(stated) = self.genus {
            if stated != g {
                return Err(GlueError::Consistency(format!("stated genus {stated} but the genus formula gives {g}")));
            }
        }
        Ok(())
    }
}

/// Complex index of `D_{f₀}`: `⟨c1, A⟩ + n(1 − g)`.
pub fn riemann_roch_index(c1a: i64, g: i64, n: i64) -> Result<i64> {
    if n < 1 || g < 0 {
        return Err(GlueError::Domain(format!("need n >= 1 and g >= 0, got n = {n}, g = {g}")));
    }
    Ok(c1a + n * (1 - g))
}

/// Formal complex dimension `i(A, g) = ⟨c1, A⟩ + (n − 3)(1 − g)`.
pub fn moduli_formal_dim(c1a: i64, g: i64, n: i64) -> Result<i64> {
    let i = c1a + (n - 3) * (1 - g);
    let via_index = riemann_roch_index(c1a, g, n)? + 3 * g - 3;
    if i != via_index {
        return Err(GlueError::Consistency(format!("i(A,g) = {i} but ind + 3g − 3 = {via_index}")));
    }
    Ok(i)
}

/// Index of the normal operator, `⟨c1, A⟩ + g − 1 − m − |df₀⁻¹(0)|`, checked
/// against the sum over components of `c1(Ñ_i) + 1 − g̃_i`.
pub fn normal_index(config: &NodalConfiguration) -> Result<i64> {
    config.validate()?;
    if config.n != 2 {
        return Err(GlueError::Domain(format!("the normal index is defined for n = 2, got n = {}", config.n)));
    }
    let c1a = config.c1_total.unwrap_or_else(|| config.c1());
    let g = config.genus.unwrap_or_else(|| config.arithmetic_genus());
    let global = c1a + g - 1 - config.m - config.df_zeros();
    let per_component: i64 = config
        .components
        .iter()
        .map(|c| {
            let c1_normal = c.c1_pairing - 2 * (1 - c.genus) - c.df_zero_count;
            c1_normal + 1 - c.genus
        })
        .sum();
    if global != per_component {
        return Err(GlueError::Consistency(format!(
            "normal index {global} from totals but {per_component} from components"
        )));
    }
    Ok(global)
}

fn half_even(v: i64, what: &str) -> Result<i64> {
    if v.rem_euclid(2) != 0 {
        return Err(GlueError::Parity(format!("{what} = {v} is odd")));
    }
    Ok(v / 2)
}

/// `d(A) = (A·A + ⟨c1, A⟩)/2`.
#[allow(non_snake_case)]
pub fn d_of_A(aa: i64, c1a: i64) -> Result<i64> {
    half_even(aa + c1a, "A·A + ⟨c1, A⟩")
}

/// `g_a(A) = (A·A − ⟨c1, A⟩)/2 + 1`.
pub fn arithmetic_genus_class(aa: i64, c1a: i64) -> Result<i64> {
    Ok(half_even(aa - c1a, "A·A − ⟨c1, A⟩")? + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjunctionDefect {
    /// `Σ δ(s) = g_a(A) − g_a(Σ) + m`.
    pub delta_sum: i64,
    /// Whether every singular point is a node of the source (`Σ δ(s) = m`).
    pub nodal: bool,
}

/// The singularity count `Σ δ(s)` of the image from the adjunction formula.
pub fn adjunction_defect(config: &NodalConfiguration, source_genus: i64) -> Result<AdjunctionDefect> {
    config.validate()?;
    let ga = arithmetic_genus_class(config.self_intersection(), config.c1())?;
    let delta_sum = ga - source_genus + config.m;
    if delta_sum < 0 {
        return Err(GlueError::Consistency(format!("adjunction gives Σδ = {delta_sum} < 0")));
    }
    Ok(AdjunctionDefect { delta_sum, nodal: delta_sum == config.m })
}

/// `⟨c1, A_i⟩ > |df_i⁻¹(0)|` per component.
pub fn regularity_check(config: &NodalConfiguration) -> Vec<bool> {
    config.components.iter().map(|c| c.c1_pairing > c.df_zero_count).collect()
}

/// `|F_i| + |df_i⁻¹(0)| < ⟨c1, A_i⟩` per component.
pub fn fixed_points_check(config: &NodalConfiguration) -> Vec<bool> {
    config.components.iter().map(|c| c.marked_count + c.df_zero_count < c.c1_pairing).collect()
}

/// `χ(TΣ₀) = Σ (3 − 3g̃_i) − 2m`.
pub fn tangent_euler_characteristic(config: &NodalConfiguration) -> i64 {
    config.components.iter().map(|c| 3 - 3 * c.genus).sum::<i64>() - 2 * config.m
}

/// Index of the operator on the glued curves, `ind(D_{f₀}) − χ(TΣ₀)`.
pub fn glued_index(config: &NodalConfiguration) -> Result<i64> {
    config.validate()?;
    let g = config.arithmetic_genus();
    let ind = riemann_roch_index(config.c1(), g, config.n)?;
    let chi = tangent_euler_characteristic(config);
    if chi != 3 - 3 * g + config.m {
        return Err(GlueError::Consistency(format!("χ(TΣ₀) = {chi} but 3 − 3g + m = {}", 3 - 3 * g + config.m)));
    }
    Ok(ind - chi)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexReport {
    pub ind_d: i64,
    pub i_ag: i64,
    /// Absent unless `n = 2`.
    pub ind_normal: Option<i64>,
    pub d_a: i64,
    pub g_a: i64,
    pub delta_sum: i64,
    pub nodal: bool,
    pub glued_index: i64,
    pub regular: Vec<bool>,
    pub fixed_ok: Vec<bool>,
}

/// Every index quantity of a configuration; the source genus is the
/// arithmetic genus of the nodal source.
pub fn index_report(config: &NodalConfiguration) -> Result<IndexReport> {
    config.validate()?;
    let g = config.arithmetic_genus();
    let c1a = config.c1();
    let aa = config.self_intersection();
    let ind_d = riemann_roch_index(c1a, g, config.n)?;
    let i_ag = moduli_formal_dim(c1a, g, config.n)?;
    let ind_normal = if config.n == 2 { Some(normal_index(config)?) } else { None };
    if let Some(v) = ind_normal {
        if v != i_ag - config.m - config.df_zeros() {
            return Err(GlueError::Consistency(format!("normal index {v} differs from i(A,g) − m − zeros")));
        }
    }
    let adj = adjunction_defect(config, g)?;
    Ok(IndexReport {
        ind_d,
        i_ag,
        ind_normal,
        d_a: d_of_A(aa, c1a)?,
        g_a: arithmetic_genus_class(aa, c1a)?,
        delta_sum: adj.delta_sum,
        nodal: adj.nodal,
        glued_index: glued_index(config)?,
        regular: regularity_check(config),
        fixed_ok: fixed_points_check(config),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stratum {
    pub name: String,
    /// Formal complex dimension.
    pub dim: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cp2Report {
    pub d: i64,
    pub genus: i64,
    /// `d(A) = d(d+3)/2`.
    pub dim_c: i64,
    /// Real dimension `d(d+3)` of one fiber of the family.
    pub real_fiber_dim: i64,
    /// Real dimension `d(d+3) + 1` of the family over `[0, 1]`.
    pub real_total_dim: i64,
    pub max_fixed_points: i64,
    pub strata: Vec<Stratum>,
}

fn cp2_line_class(d: i64) -> (i64, i64) {
    (d * d, 3 * d)
}

/// Degree-`d` curves in `CP²` (`A = d[L]`, `A·A = d²`, `⟨c1, A⟩ = 3d`), with
/// the singular strata of degrees 2 and 3.
pub fn cp2_stratum_report(d: i64) -> Result<Cp2Report> {
    if d <= 0 {
        return Err(GlueError::Domain(format!("degree d = {d} must be positive")));
    }
    let (aa, c1a) = cp2_line_class(d);
    let genus = arithmetic_genus_class(aa, c1a)?;
    let dim_c = d_of_A(aa, c1a)?;
    let line = |count: i64| Component { genus: 0, c1_pairing: 3, df_zero_count: 0, marked_count: count };
    let strata = match d {
        2 => {
            let two_lines = NodalConfiguration {
                components: vec![line(0), line(0)],
                m: 1,
                intersection: vec![vec![1, 1], vec![1, 1]],
                n: 2,
                c1_total: None,
                genus: None,
            };
            let (laa, lc1) = cp2_line_class(1);
            vec![
                Stratum { name: "two lines".into(), dim: normal_index(&two_lines)? },
                // a double line is determined by its reduced line
                Stratum { name: "double line".into(), dim: d_of_A(laa, lc1)? },
            ]
        }
        3 => {
            let node = NodalConfiguration::irreducible(0, c1a, aa, 1, 0);
            let cusp = NodalConfiguration::irreducible(0, c1a, aa, 0, 1);
            vec![
                Stratum { name: "rational with one node".into(), dim: normal_index(&node)? },
                Stratum { name: "rational with one cusp".into(), dim: normal_index(&cusp)? },
            ]
        }
        _ => vec![],
    };
    Ok(Cp2Report {
        d,
        genus,
        dim_c,
        real_fiber_dim: 2 * dim_c,
        real_total_dim: 2 * dim_c + 1,
        max_fixed_points: 3 * d - 1,
        strata,
    })
}

/// Fixed-width text table of a report.
pub fn format_index_report(report: &IndexReport) -> String {
    let flags = |v: &[bool]| v.iter().map(|b| if *b { "yes" } else { "no" }).collect::<Vec<_>>().join(",");
    let rows = [
        ("ind(D)", report.ind_d.to_string()),
        ("i(A,g)", report.i_ag.to_string()),
        ("ind(D^N)", report.ind_normal.map_or("-".into(), |v| v.to_string())),
        ("d(A)", report.d_a.to_string()),
        ("g_a(A)", report.g_a.to_string()),
        ("sum delta", report.delta_sum.to_string()),
        ("nodal", report.nodal.to_string()),
        ("ind(D_t)", report.glued_index.to_string()),
        ("regular", flags(&report.regular)),
        ("fixed ok", flags(&report.fixed_ok)),
    ];
    rows.iter().map(|(k, v)| format!("{k:<10} {v}\n")).collect()
}
