//! CSV dump and reload of materialized environment windows.

use std::io::{Read, Write};

use super::ensemble::{EnvSpec, Environment, Mode};
use super::site::{RwreSiteLaw, SiteRates};
use crate::error::{Error, Result};

/// Writes sites `a..=b` as `site, mu<L>, ..., mu1, lambda1, ..., lambda<R>`.
pub fn write_rates_csv<W: Write>(env: &Environment<SiteRates>, a: i64, b: i64, out: W) -> Result<()> {
    let sites = env.sites(a, b)?;
    let (l, r) = (sites[0].l(), sites[0].r());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["site".to_string()];
    header.extend((1..=l).rev().map(|i| format!("mu{i}")));
    header.extend((1..=r).map(|i| format!("lambda{i}")));
    w.write_record(&header)?;
    for (x, site) in (a..=b).zip(&sites) {
        let mut row = vec![x.to_string()];
        row.extend(site.ordered().iter().map(|v| format!("{v:?}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a file written by [`write_rates_csv`] as an explicit environment.
pub fn read_rates_csv<R: Read>(input: R) -> Result<EnvSpec<SiteRates>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    let l = header.iter().filter(|h| h.starts_with("mu")).count();
    let r = header.iter().filter(|h| h.starts_with("lambda")).count();
    let mut first = None;
    let mut sites = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let x: i64 = parse(&rec[0])?;
        let expected = first.map_or(x, |f: i64| f + sites.len() as i64);
        if x != expected {
            return Err(Error::config(format!("site rows must be consecutive, got {x} after {}", expected - 1)));
        }
        first.get_or_insert(x);
        let values = rec.iter().skip(1).map(parse).collect::<Result<Vec<f64>>>()?;
        sites.push(SiteRates::from_ordered(l, r, &values)?);
    }
    let first = first.ok_or_else(|| Error::config("environment CSV has no rows"))?;
    EnvSpec::new(Mode::Explicit { first, sites })
}

/// Writes sites `a..=b` in long form: `site, offset, prob`.
pub fn write_laws_csv<W: Write>(env: &Environment<RwreSiteLaw>, a: i64, b: i64, out: W) -> Result<()> {
    let sites = env.sites(a, b)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["site", "offset", "prob"])?;
    for (x, law) in (a..=b).zip(&sites) {
        for (j, p) in law.support() {
            w.write_record([x.to_string(), j.to_string(), format!("{p:?}")])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_laws_csv<R: Read>(input: R) -> Result<EnvSpec<RwreSiteLaw>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut rows: Vec<(i64, i64, f64)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        rows.push((parse(&rec[0])?, parse(&rec[1])?, parse(&rec[2])?));
    }
    let first = rows.first().map(|r| r.0).ok_or_else(|| Error::config("environment CSV has no rows"))?;
    let mut sites = Vec::new();
    let mut i = 0;
    while i < rows.len() {
        let x = rows[i].0;
        if x != first + sites.len() as i64 {
            return Err(Error::config(format!("site rows must be consecutive, got {x}")));
        }
        let end = rows[i..].iter().position(|r| r.0 != x).map_or(rows.len(), |k| i + k);
        sites.push(RwreSiteLaw::new(rows[i..end].iter().map(|r| (r.1, r.2)))?);
        i = end;
    }
    EnvSpec::new(Mode::Explicit { first, sites })
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::config(format!("cannot parse CSV field {s:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::sample_environment;

    #[test]
    fn rates_round_trip() {
        let spec =
            EnvSpec::new(Mode::IidUniform { template: SiteRates::from_ordered(2, 2, &[1.0; 4]).unwrap(), low: 0.5, high: 3.0 }).unwrap();
        let env = sample_environment(&spec, 5, (-3, 3)).unwrap();
        let mut buf = Vec::new();
        write_rates_csv(&env, -3, 3, &mut buf).unwrap();
        let loaded = Environment::new(read_rates_csv(buf.as_slice()).unwrap(), 0).unwrap();
        assert_eq!(loaded.sites(-3, 3).unwrap(), env.sites(-3, 3).unwrap());
        assert!(loaded.site(4).is_err());
    }

    #[test]
    fn laws_round_trip() {
        let spec = EnvSpec::new(Mode::Periodic(vec![
            RwreSiteLaw::new([(1, 0.7), (-1, 0.3)]).unwrap(),
            RwreSiteLaw::new([(1, 0.6), (-2, 0.4)]).unwrap(),
        ]))
        .unwrap();
        let env = sample_environment(&spec, 0, (0, 3)).unwrap();
        let mut buf = Vec::new();
        write_laws_csv(&env, 0, 3, &mut buf).unwrap();
        let loaded = Environment::new(read_laws_csv(buf.as_slice()).unwrap(), 0).unwrap();
        assert_eq!(loaded.sites(0, 3).unwrap(), env.sites(0, 3).unwrap());
    }
}
