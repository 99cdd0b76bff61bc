use std::io::Write;

use super::{PersonRecord, WorldTruth};

fn join<I: IntoIterator<Item = String>>(items: I) -> String {
    items.into_iter().collect::<Vec<_>>().join(";")
}

/// One row per person: id, scope flag, true address and locality, covariates.
pub fn write_world_csv<W: Write>(world: &WorldTruth, out: W) -> csv::Result<()> {
    let map = world.locality_map();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "in_scope", "address", "locality", "z1", "z2", "attribute", "family"])?;
    for p in &world.persons {
        let addr = p.true_address.map(|a| a.0.to_string()).unwrap_or_default();
        let loc = p.true_address.and_then(|a| map.locality_of(a)).map(|i| i.to_string()).unwrap_or_default();
        w.write_record([
            p.id.0.to_string(),
            u8::from(p.alive_in_scope).to_string(),
            addr,
            loc,
            p.covariates[0].to_string(),
            p.covariates[1].to_string(),
            p.attribute.to_string(),
            p.family.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per register record; list-valued fields are `;`-joined.
pub fn write_pd_csv<W: Write>(pd: &[PersonRecord], world: &WorldTruth, out: W) -> csv::Result<()> {
    let map = world.locality_map();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "q", "addresses", "localities", "z1", "z2", "core", "label", "label_epoch", "sol_score"])?;
    for r in pd {
        let addresses = join(r.sol.iter().map(|s| s.address.0.to_string()));
        let localities =
            join(r.sol.iter().map(|s| map.locality_of(s.address).map(|i| i.to_string()).unwrap_or_default()));
        w.write_record([
            r.id.0.to_string(),
            r.q().to_string(),
            addresses,
            localities,
            r.covariates[0].to_string(),
            r.covariates[1].to_string(),
            u8::from(r.core).to_string(),
            r.label.map(|l| l.code()).unwrap_or_default(),
            r.label_epoch.map(|e| e.to_string()).unwrap_or_default(),
            r.sol_score.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{derive_pd, generate_world, replicate_rng, ScenarioConfig};

    #[test]
    fn csv_has_one_row_per_entity() {
        let mut cfg = ScenarioConfig::default();
        cfg.world.population = 50;
        let w = generate_world(&cfg, &mut replicate_rng(1, 0)).unwrap();
        let pd = derive_pd(&w, &cfg, &mut replicate_rng(1, 1)).unwrap();
        let mut a = Vec::new();
        write_world_csv(&w, &mut a).unwrap();
        let mut b = Vec::new();
        write_pd_csv(&pd, &w, &mut b).unwrap();
        assert_eq!(String::from_utf8(a).unwrap().lines().count(), w.persons.len() + 1);
        assert_eq!(String::from_utf8(b).unwrap().lines().count(), pd.len() + 1);
    }
}
