use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::energy::SynthParams;
use crate::lamellae::LamellaParams;
use crate::orientation::OdfParams;
use crate::polytope::{Aabb, Vec3};
use crate::regression::Marking;
use crate::schema::{check, CONFIG_SCHEMA};
use crate::tessellation::FitOptions;
use crate::twinning::{HallPetchOrientation, TwinDecisionParams, TwinningSystem};

use super::PipelineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LamellaMethod {
    Growth,
    Anneal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarkingKind {
    Im,
    Ma,
}

impl From<MarkingKind> for Marking {
    fn from(m: MarkingKind) -> Self {
        match m {
            MarkingKind::Im => Marking::Independent,
            MarkingKind::Ma => Marking::MovingAverage,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwinningConfig {
    pub n1: [f64; 3],
    pub a1: [f64; 3],
    pub n2: [f64; 3],
    pub a2: [f64; 3],
    /// Overrides the shear derived from the twinning angle.
    pub shear: Option<f64>,
    pub psi1: f64,
    pub psi2: f64,
    pub loading_direction: [f64; 3],
    pub hall_petch: HallPetchOrientation,
}

impl Default for TwinningConfig {
    fn default() -> Self {
        let s = TwinningSystem::bcc_114();
        let arr = |v: Vec3| [v.x, v.y, v.z];
        Self {
            n1: arr(s.n1),
            a1: arr(s.a1),
            n2: arr(s.n2),
            a2: arr(s.a2),
            shear: None,
            psi1: 0.2,
            psi2: 0.4,
            loading_direction: [0.0, 0.0, 1.0],
            hall_petch: HallPetchOrientation::Swapped,
        }
    }
}

impl TwinningConfig {
    pub fn system(&self) -> Result<TwinningSystem, PipelineError> {
        let v = |a: [f64; 3]| Vec3::new(a[0], a[1], a[2]);
        TwinningSystem::new(v(self.n1), v(self.a1), v(self.n2), v(self.a2), self.shear)
            .map_err(|e| PipelineError::config(format!("twinning system: {e}")))
    }

    pub fn loading(&self) -> Vec3 {
        Vec3::new(self.loading_direction[0], self.loading_direction[1], self.loading_direction[2]).normalize()
    }

    pub fn decision_params(&self, v_min: f64, v_max: f64) -> Result<TwinDecisionParams, PipelineError> {
        TwinDecisionParams::new(self.psi1, self.psi2, v_min, v_max, self.loading())
            .map(|p| p.with_orientation(self.hall_petch))
            .map_err(|e| PipelineError::config(format!("twin decision: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyConfig {
    pub enabled: bool,
    /// Elements per unit volume.
    pub density: f64,
    pub lamella_energy: f64,
    pub matrix_energy: f64,
    pub noise: f64,
    pub strain_amplitude: f64,
    /// Also write every synthetic element, not only the TSED summary.
    pub write_elements: bool,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        let s = SynthParams::default();
        Self {
            enabled: true,
            density: s.density,
            lamella_energy: s.lamella_energy,
            matrix_energy: s.matrix_energy,
            noise: s.noise,
            strain_amplitude: s.strain_amplitude,
            write_elements: false,
        }
    }
}

impl EnergyConfig {
    pub fn synth_params(&self, direction: Vec3) -> SynthParams {
        SynthParams {
            density: self.density,
            lamella_energy: self.lamella_energy,
            matrix_energy: self.matrix_energy,
            noise: self.noise,
            strain_amplitude: self.strain_amplitude,
            direction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema: String,
    pub seed: u64,
    /// Mean number of generators per unit volume.
    pub lambda0: f64,
    /// Plus-sampling margin around the unit observation window.
    pub margin: f64,
    pub diameter_mu: f64,
    pub diameter_sigma: f64,
    pub fit_tol: f64,
    pub fit_max_iterations: usize,
    pub kappa: Vec<f64>,
    /// Moving-average marking is only defined without texture and runs at
    /// `kappa = 0` whatever the list holds.
    pub markings: Vec<MarkingKind>,
    pub epsilon_m: Vec<f64>,
    /// Crystal direction `v` of the texture density.
    pub odf_direction: [f64; 3],
    pub twinning: TwinningConfig,
    pub lamellae: LamellaParams,
    pub lamella_method: LamellaMethod,
    pub energy: EnergyConfig,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema: CONFIG_SCHEMA.to_string(),
            seed: 1,
            lambda0: 100.0,
            margin: 0.5,
            diameter_mu: 5.1,
            diameter_sigma: 1.3,
            fit_tol: FitOptions::default().tol,
            fit_max_iterations: FitOptions::default().max_iterations,
            kappa: vec![0.0, 10.0, 20.0, 30.0],
            markings: vec![MarkingKind::Im, MarkingKind::Ma],
            epsilon_m: (0..7).map(|i| 0.05 + 0.025 * i as f64).collect(),
            odf_direction: [1.0, 1.0, 1.0],
            twinning: TwinningConfig::default(),
            lamellae: LamellaParams::default(),
            lamella_method: LamellaMethod::Growth,
            energy: EnergyConfig::default(),
            output: PathBuf::from("twinlab-out"),
        }
    }
}

/// One texture/marking combination; crossed with the strain levels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Variant {
    pub marking: Marking,
    pub kappa: f64,
}

impl Variant {
    pub fn label(&self) -> String {
        format!("{}_k{}", self.marking.as_str(), self.kappa)
    }
}

pub fn epsilon_label(eps: f64) -> String {
    format!("e{eps:.4}")
}

/// The profile shipped as `study.toml`.
pub const STUDY_TOML: &str = include_str!("../../study.toml");

impl RunConfig {
    pub fn study() -> Self {
        Self::from_toml(STUDY_TOML).expect("shipped profile is valid")
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let c: RunConfig = toml::from_str(text).map_err(|e| PipelineError::config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn window(&self) -> Aabb {
        Aabb::unit()
    }

    pub fn domain(&self) -> Aabb {
        Aabb::cube(-self.margin, 1.0 + self.margin)
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions { tol: self.fit_tol, max_iterations: self.fit_max_iterations }
    }

    pub fn odf(&self, kappa: f64) -> Result<OdfParams, PipelineError> {
        let v = Vec3::new(self.odf_direction[0], self.odf_direction[1], self.odf_direction[2]);
        OdfParams::new(kappa, self.twinning.loading(), v).map_err(|e| PipelineError::config(format!("odf: {e}")))
    }

    pub fn variants(&self) -> Vec<Variant> {
        let mut out = Vec::new();
        for m in &self.markings {
            match m {
                MarkingKind::Im => {
                    out.extend(self.kappa.iter().map(|&kappa| Variant { marking: Marking::Independent, kappa }))
                }
                MarkingKind::Ma => out.push(Variant { marking: Marking::MovingAverage, kappa: 0.0 }),
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::config(m));
        check(&self.schema, CONFIG_SCHEMA).map_err(|e| PipelineError::config(e.to_string()))?;
        if !(self.lambda0 > 0.0 && self.lambda0.is_finite()) {
            return bad(format!("lambda0 must be positive, got {}", self.lambda0));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return bad(format!("margin must be nonnegative, got {}", self.margin));
        }
        if !(self.diameter_mu > 0.0 && self.diameter_sigma > 0.0) {
            return bad("diameter mu and sigma must be positive".into());
        }
        if !(self.fit_tol > 0.0) || self.fit_max_iterations == 0 {
            return bad("fit tolerance and iteration cap must be positive".into());
        }
        if self.markings.is_empty() || self.epsilon_m.is_empty() {
            return bad("need at least one marking and one strain level".into());
        }
        if self.markings.contains(&MarkingKind::Im) && self.kappa.is_empty() {
            return bad("independent marking needs a kappa list".into());
        }
        for &k in &self.kappa {
            self.odf(k)?;
        }
        for &e in &self.epsilon_m {
            if !(e > 0.0 && e < 1.0) {
                return bad(format!("epsilon_m must lie in (0, 1), got {e}"));
            }
        }
        let labels: BTreeSet<String> = self.variants().iter().map(Variant::label).collect();
        if labels.len() != self.variants().len() {
            return bad("duplicate texture/marking variants".into());
        }
        let eps: BTreeSet<String> = self.epsilon_m.iter().map(|&e| epsilon_label(e)).collect();
        if eps.len() != self.epsilon_m.len() {
            return bad("strain levels must differ in the first four decimals".into());
        }
        self.twinning.system()?;
        self.twinning.decision_params(1.0, 2.0)?;
        self.lamellae.validate().map_err(|e| PipelineError::config(e.to_string()))?;
        let e = &self.energy;
        if e.enabled && !(e.density > 0.0 && e.lamella_energy >= 0.0 && e.matrix_energy >= 0.0 && e.noise >= 0.0 && e.strain_amplitude > 0.0)
        {
            return bad("energy parameters out of range".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn study_profile() {
        let c = RunConfig::study();
        assert_eq!(c.variants().len(), 5);
        assert_eq!(c.variants().len() * c.epsilon_m.len(), 35);
        assert!((c.epsilon_m[6] - 0.2).abs() < 1e-12);
        assert_eq!(c.domain(), Aabb::cube(-0.5, 1.5));
        assert_eq!(c.lamellae, LamellaParams::default());
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_input() {
        let c = RunConfig::study();
        let text = c.to_toml().replace(CONFIG_SCHEMA, "twinlab-config/9");
        assert!(RunConfig::from_toml(&text).is_err());
        assert!(RunConfig::from_toml(&format!("{}\nbogus = 1\n", c.to_toml())).is_err());
        let mut d = c.clone();
        d.twinning.psi1 = 0.5;
        assert!(d.validate().is_err());
        let mut d = c.clone();
        d.lamellae.zeta2 = 0.7;
        assert!(d.validate().is_err());
        let mut d = c;
        d.epsilon_m = vec![0.1, 0.1];
        assert!(d.validate().is_err());
    }
}
