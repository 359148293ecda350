//! Smart-meter readings: conversion to power, aggregation, CSV and a
//! synthetic generator for feeders without real meter data.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::LoadGenError;
use crate::netmodel::NetworkModel;
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq)]
pub struct MeterReadingSeries {
    pub meter_id: String,
    pub transformer_id: String,
    pub timestamps: Vec<String>,
    pub energy_kwh: Vec<f64>,
    pub interval_hours: f64,
}

/// Average power over one transformer's meters.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerSeries {
    pub timestamps: Vec<String>,
    pub power_kw: Vec<f64>,
}

pub fn energy_to_power(series: &MeterReadingSeries) -> Result<Vec<f64>, LoadGenError> {
    if !(series.interval_hours > 0.0) {
        return Err(LoadGenError::InvalidInterval(series.interval_hours));
    }
    if let Some(e) = series.energy_kwh.iter().find(|e| !(**e >= 0.0)) {
        return Err(LoadGenError::InvalidParameter(format!(
            "meter {}: energy {e} kWh is negative",
            series.meter_id
        )));
    }
    Ok(series
        .energy_kwh
        .iter()
        .map(|e| e / series.interval_hours)
        .collect())
}

/// Sum meter power per transformer. All series must share timestamps and
/// interval length.
pub fn aggregate_to_transformer(
    series: &[MeterReadingSeries],
) -> Result<BTreeMap<String, TransformerSeries>, LoadGenError> {
    let Some(first) = series.first() else {
        return Ok(BTreeMap::new());
    };
    let mut out: BTreeMap<String, TransformerSeries> = BTreeMap::new();
    for s in series {
        if s.timestamps != first.timestamps || s.interval_hours != first.interval_hours {
            return Err(LoadGenError::Misaligned(s.meter_id.clone()));
        }
        if s.energy_kwh.len() != s.timestamps.len() {
            return Err(LoadGenError::Misaligned(s.meter_id.clone()));
        }
        let p = energy_to_power(s)?;
        let entry = out
            .entry(s.transformer_id.clone())
            .or_insert_with(|| TransformerSeries {
                timestamps: s.timestamps.clone(),
                power_kw: vec![0.0; p.len()],
            });
        for (acc, v) in entry.power_kw.iter_mut().zip(p) {
            *acc += v;
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct MeterRow {
    meter_id: String,
    transformer_id: String,
    timestamp: String,
    kwh: f64,
}

/// Read `meter_id, transformer_id, timestamp, kwh` rows; rows of one meter
/// must be contiguous in time order.
pub fn read_meter_csv<R: Read>(
    reader: R,
    interval_hours: f64,
) -> Result<Vec<MeterReadingSeries>, LoadGenError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut order: Vec<String> = Vec::new();
    let mut by_meter: BTreeMap<String, MeterReadingSeries> = BTreeMap::new();
    for row in rdr.deserialize() {
        let row: MeterRow = row?;
        let entry = by_meter.entry(row.meter_id.clone()).or_insert_with(|| {
            order.push(row.meter_id.clone());
            MeterReadingSeries {
                meter_id: row.meter_id.clone(),
                transformer_id: row.transformer_id.clone(),
                timestamps: vec![],
                energy_kwh: vec![],
                interval_hours,
            }
        });
        if entry.transformer_id != row.transformer_id {
            return Err(LoadGenError::InvalidParameter(format!(
                "meter {} listed under two transformers",
                row.meter_id
            )));
        }
        entry.timestamps.push(row.timestamp);
        entry.energy_kwh.push(row.kwh);
    }
    Ok(order
        .into_iter()
        .map(|id| by_meter.remove(&id).unwrap())
        .collect())
}

pub fn write_meter_csv<W: Write>(
    writer: W,
    series: &[MeterReadingSeries],
) -> Result<(), LoadGenError> {
    let mut w = csv::Writer::from_writer(writer);
    for s in series {
        for (t, e) in s.timestamps.iter().zip(&s.energy_kwh) {
            w.serialize(MeterRow {
                meter_id: s.meter_id.clone(),
                transformer_id: s.transformer_id.clone(),
                timestamp: t.clone(),
                kwh: *e,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Label of the transformer that feeds one load point, e.g. `860.B`.
pub fn load_point_label(net: &NetworkModel, point: usize) -> String {
    let lp = &net.load_points()[point];
    format!("{}.{}", net.bus_id(lp.bus), lp.phase)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticMeterConfig {
    pub meters_per_point: usize,
    pub days: usize,
    pub interval_hours: f64,
    /// Peak-to-mean swing of the daily shape.
    pub daily_swing: f64,
    /// Relative std of multiplicative per-reading noise.
    pub noise: f64,
}

impl Default for SyntheticMeterConfig {
    fn default() -> Self {
        SyntheticMeterConfig {
            meters_per_point: 4,
            days: 365,
            interval_hours: 1.0,
            daily_swing: 0.35,
            noise: 0.2,
        }
    }
}

/// Generate meter readings whose transformer totals average to each load
/// point's nominal demand, with an evening-peaking daily shape.
pub fn synthetic_meters(
    net: &NetworkModel,
    cfg: &SyntheticMeterConfig,
    seed: u64,
) -> Result<Vec<MeterReadingSeries>, LoadGenError> {
    if cfg.meters_per_point == 0 || cfg.days == 0 || !(cfg.interval_hours > 0.0) {
        return Err(LoadGenError::InvalidParameter(
            "synthetic meter config needs positive sizes".into(),
        ));
    }
    let steps = ((cfg.days as f64 * 24.0) / cfg.interval_hours).round() as usize;
    let timestamps: Vec<String> = (0..steps).map(|i| format!("{}", i)).collect();
    let mut out = Vec::new();
    for (pi, lp) in net.load_points().iter().enumerate() {
        let label = load_point_label(net, pi);
        let share = lp.p_kw / cfg.meters_per_point as f64;
        for m in 0..cfg.meters_per_point {
            let mut rng = substream(seed, &format!("meter/{label}"), m as u64);
            let phase_shift: f64 = rng.random_range(-2.0..2.0);
            let energy_kwh = (0..steps)
                .map(|i| {
                    let hour = (i as f64 * cfg.interval_hours) % 24.0;
                    let shape = 1.0
                        + cfg.daily_swing
                            * (2.0 * std::f64::consts::PI * (hour - 13.0 - phase_shift) / 24.0)
                                .sin();
                    let z: f64 = rng.sample(StandardNormal);
                    (share * shape * (1.0 + cfg.noise * z)).max(0.0) * cfg.interval_hours
                })
                .collect();
            out.push(MeterReadingSeries {
                meter_id: format!("{label}-m{m}"),
                transformer_id: label.clone(),
                timestamps: timestamps.clone(),
                energy_kwh,
                interval_hours: cfg.interval_hours,
            });
        }
    }
    Ok(out)
}
