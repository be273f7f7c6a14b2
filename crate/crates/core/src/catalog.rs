//! Earthquake catalogs and plate-boundary polylines.
//!
//! Catalog rows follow the ComCat CSV export convention (`time`, `latitude`,
//! `longitude`, `depth`, `mag`). Times are converted to fractional days from
//! the start of the configured window at parse time and never revisited. All
//! spatial quantities stay in raw degrees on the (lon, lat) plane.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{EtasError, Result};

const SECONDS_PER_DAY: f64 = 86_400.0;

/// Axis-aligned spatial domain in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
}

impl Domain {
    pub fn new(lon_min: f64, lon_max: f64, lat_min: f64, lat_max: f64) -> Result<Self> {
        let all_finite = [lon_min, lon_max, lat_min, lat_max]
            .iter()
            .all(|v| v.is_finite());
        if !all_finite || lon_max <= lon_min || lat_max <= lat_min {
            return Err(EtasError::InvalidParameter(format!(
                "domain [{lon_min}, {lon_max}] x [{lat_min}, {lat_max}] is empty or not finite"
            )));
        }
        Ok(Domain {
            lon_min,
            lon_max,
            lat_min,
            lat_max,
        })
    }

    /// Closed-rectangle membership.
    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        lon >= self.lon_min && lon <= self.lon_max && lat >= self.lat_min && lat <= self.lat_max
    }

    pub fn width(&self) -> f64 {
        self.lon_max - self.lon_min
    }

    pub fn height(&self) -> f64 {
        self.lat_max - self.lat_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
}

/// A single earthquake.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub lon: f64,
    pub lat: f64,
    /// Days since the start of the training window.
    pub t: f64,
    pub mag: f64,
    /// Focal depth in km; only used for filtering.
    #[serde(default)]
    pub depth: f64,
}

impl Event {
    pub fn new(lon: f64, lat: f64, t: f64, mag: f64) -> Self {
        Event {
            lon,
            lat,
            t,
            mag,
            depth: 0.0,
        }
    }
}

/// Time-ordered events over a rectangular domain, split into a training
/// window `[0, T)` and a forecast window `[T, T + F)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    events: Vec<Event>,
    pub domain: Domain,
    pub train_len_days: f64,
    pub forecast_len_days: f64,
    /// Magnitude threshold applied at parse time, echoed into every output.
    pub min_magnitude: Option<f64>,
}

impl Catalog {
    /// Builds a catalog, sorting events stably by time and checking that every
    /// event lies inside the domain and the combined window.
    pub fn new(
        mut events: Vec<Event>,
        domain: Domain,
        train_len_days: f64,
        forecast_len_days: f64,
    ) -> Result<Self> {
        if !(train_len_days > 0.0) || !train_len_days.is_finite() {
            return Err(EtasError::InvalidParameter(format!(
                "training length must be positive, got {train_len_days}"
            )));
        }
        if !(forecast_len_days >= 0.0) || !forecast_len_days.is_finite() {
            return Err(EtasError::InvalidParameter(format!(
                "forecast length must be non-negative, got {forecast_len_days}"
            )));
        }
        let end = train_len_days + forecast_len_days;
        for (i, e) in events.iter().enumerate() {
            if ![e.lon, e.lat, e.t, e.mag].iter().all(|v| v.is_finite()) {
                return Err(EtasError::InvalidParameter(format!(
                    "event {i} has a non-finite field"
                )));
            }
            if !domain.contains(e.lon, e.lat) {
                return Err(EtasError::InvalidParameter(format!(
                    "event {i} at ({}, {}) lies outside the domain",
                    e.lon, e.lat
                )));
            }
            if e.t < 0.0 || e.t >= end {
                return Err(EtasError::InvalidParameter(format!(
                    "event {i} at t = {} lies outside [0, {end})",
                    e.t
                )));
            }
        }
        events.sort_by(|a, b| a.t.total_cmp(&b.t));
        Ok(Catalog {
            events,
            domain,
            train_len_days,
            forecast_len_days,
            min_magnitude: None,
        })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Events with `t < T`.
    pub fn training(&self) -> &[Event] {
        let n = self.events.partition_point(|e| e.t < self.train_len_days);
        &self.events[..n]
    }

    /// Events with `T <= t < T + F`.
    pub fn forecast(&self) -> &[Event] {
        let n = self.events.partition_point(|e| e.t < self.train_len_days);
        &self.events[n..]
    }

    /// Number of events strictly before `t`.
    pub fn count_before(&self, t: f64) -> usize {
        self.events.partition_point(|e| e.t < t)
    }

    /// A copy restricted to the training window, with no forecast period.
    pub fn training_catalog(&self) -> Catalog {
        Catalog {
            events: self.training().to_vec(),
            domain: self.domain,
            train_len_days: self.train_len_days,
            forecast_len_days: 0.0,
            min_magnitude: self.min_magnitude,
        }
    }
}

/// Calendar window: training covers `[start, train_end)`, forecasting
/// covers `[train_end, forecast_end)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeWindow {
    pub start: NaiveDateTime,
    pub train_end: NaiveDateTime,
    pub forecast_end: NaiveDateTime,
}

impl TimeWindow {
    pub fn new(
        start: NaiveDateTime,
        train_end: NaiveDateTime,
        forecast_end: NaiveDateTime,
    ) -> Result<Self> {
        if train_end <= start || forecast_end < train_end {
            return Err(EtasError::InvalidParameter(
                "time window must satisfy start < train_end <= forecast_end".into(),
            ));
        }
        Ok(TimeWindow {
            start,
            train_end,
            forecast_end,
        })
    }

    /// Parses three timestamps (dates or ISO-8601 datetimes, UTC).
    pub fn parse(start: &str, train_end: &str, forecast_end: &str) -> Result<Self> {
        let p = |s: &str| {
            parse_timestamp(s).ok_or_else(|| {
                EtasError::InvalidParameter(format!("cannot parse timestamp `{s}`"))
            })
        };
        TimeWindow::new(p(start)?, p(train_end)?, p(forecast_end)?)
    }

    fn days_from_start(&self, t: NaiveDateTime) -> f64 {
        seconds_between(self.start, t) / SECONDS_PER_DAY
    }
}

fn seconds_between(a: NaiveDateTime, b: NaiveDateTime) -> f64 {
    let d = b - a;
    d.num_seconds() as f64 + f64::from(d.subsec_nanos()) * 1e-9
}

/// Parses an ISO-8601 UTC timestamp in the shapes ComCat and hand-written
/// configs produce: full RFC 3339, minute resolution with `Z`, space
/// separated, or a bare date (midnight).
pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.naive_utc());
    }
    let stripped = s.strip_suffix('Z').unwrap_or(s);
    const FORMATS: [&str; 6] = [
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%d %H:%M",
    ];
    for f in FORMATS {
        if let Ok(dt) = NaiveDateTime::parse_from_str(stripped, f) {
            return Some(dt);
        }
    }
    NaiveDate::parse_from_str(stripped, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
}

/// Filtering options applied while reading a raw catalog.
#[derive(Debug, Clone, Copy)]
pub struct CatalogFilter {
    pub domain: Domain,
    pub depth_cutoff_km: f64,
    pub window: TimeWindow,
    pub min_magnitude: Option<f64>,
}

/// Reads a ComCat-style CSV file.
pub fn parse_catalog_csv(path: impl AsRef<Path>, filter: &CatalogFilter) -> Result<Catalog> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| EtasError::io(path, e))?;
    parse_catalog_reader(file, filter)
}

/// Reads ComCat-style CSV from any reader. Returns [`EtasError::EmptyCatalog`]
/// when nothing survives filtering.
pub fn parse_catalog_reader<R: Read>(reader: R, filter: &CatalogFilter) -> Result<Catalog> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| EtasError::MissingColumn(name.to_string()))
    };
    let c_time = column("time")?;
    let c_lat = column("latitude")?;
    let c_lon = column("longitude")?;
    let c_depth = column("depth")?;
    let c_mag = column("mag")?;

    let window = filter.window;
    let train_len = window.days_from_start(window.train_end);
    let forecast_len = window.days_from_start(window.forecast_end) - train_len;

    let mut events = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |idx: usize, name: &str| -> Result<&str> {
            record.get(idx).ok_or_else(|| EtasError::BadRow {
                line,
                message: format!("missing `{name}` field"),
            })
        };
        let number = |idx: usize, name: &str| -> Result<f64> {
            let raw = field(idx, name)?;
            raw.parse::<f64>().map_err(|_| EtasError::BadRow {
                line,
                message: format!("cannot parse `{name}` value `{raw}`"),
            })
        };
        let raw_time = field(c_time, "time")?;
        let time = parse_timestamp(raw_time).ok_or_else(|| EtasError::BadRow {
            line,
            message: format!("cannot parse time `{raw_time}`"),
        })?;
        let lat = number(c_lat, "latitude")?;
        let lon = number(c_lon, "longitude")?;
        let depth = number(c_depth, "depth")?;
        let mag = number(c_mag, "mag")?;

        if time < window.start || time >= window.forecast_end {
            continue;
        }
        if !filter.domain.contains(lon, lat) || depth > filter.depth_cutoff_km {
            continue;
        }
        if let Some(m) = filter.min_magnitude {
            if mag < m {
                continue;
            }
        }
        events.push(Event {
            lon,
            lat,
            t: window.days_from_start(time),
            mag,
            depth,
        });
    }
    if events.is_empty() {
        return Err(EtasError::EmptyCatalog);
    }
    let mut catalog = Catalog::new(events, filter.domain, train_len, forecast_len)?;
    catalog.min_magnitude = filter.min_magnitude;
    Ok(catalog)
}

/// Writes the canonical `lon,lat,t_days,mag` form. Values use the shortest
/// representation that round-trips exactly.
pub fn write_canonical_csv<W: Write>(events: &[Event], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["lon", "lat", "t_days", "mag"])?;
    for e in events {
        w.write_record([
            e.lon.to_string(),
            e.lat.to_string(),
            e.t.to_string(),
            e.mag.to_string(),
        ])?;
    }
    w.flush().map_err(|e| EtasError::io("<csv writer>", e))?;
    Ok(())
}

/// Reads the canonical CSV form. Events outside the domain or the window
/// `[0, T + F)` are dropped.
pub fn read_canonical_csv<R: Read>(
    reader: R,
    domain: Domain,
    train_len_days: f64,
    forecast_len_days: f64,
) -> Result<Catalog> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| EtasError::MissingColumn(name.to_string()))
    };
    let cols = [
        column("lon")?,
        column("lat")?,
        column("t_days")?,
        column("mag")?,
    ];
    let end = train_len_days + forecast_len_days;
    let mut events = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let mut v = [0.0; 4];
        for (slot, &c) in v.iter_mut().zip(cols.iter()) {
            let raw = record.get(c).unwrap_or("");
            *slot = raw.parse().map_err(|_| EtasError::BadRow {
                line,
                message: format!("cannot parse `{raw}`"),
            })?;
        }
        let e = Event::new(v[0], v[1], v[2], v[3]);
        if domain.contains(e.lon, e.lat) && e.t >= 0.0 && e.t < end {
            events.push(e);
        }
    }
    Catalog::new(events, domain, train_len_days, forecast_len_days)
}

/// One straight piece of a plate boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: (f64, f64),
    pub end: (f64, f64),
    pub subducting: bool,
}

impl Segment {
    pub fn midpoint(&self) -> (f64, f64) {
        (
            0.5 * (self.start.0 + self.end.0),
            0.5 * (self.start.1 + self.end.1),
        )
    }

    pub fn length(&self) -> f64 {
        (self.end.0 - self.start.0).hypot(self.end.1 - self.start.1)
    }
}

/// Piecewise-linear plate boundary restricted to a domain.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BoundaryPolyline {
    pub segments: Vec<Segment>,
}

impl BoundaryPolyline {
    pub fn subducting(&self) -> BoundaryPolyline {
        BoundaryPolyline {
            segments: self
                .segments
                .iter()
                .copied()
                .filter(|s| s.subducting)
                .collect(),
        }
    }
}

/// Reads LineString / MultiLineString features from a GeoJSON file and keeps
/// segments whose midpoint lies inside `domain`.
pub fn parse_boundary_geojson(path: impl AsRef<Path>, domain: &Domain) -> Result<BoundaryPolyline> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| EtasError::io(path, e))?;
    parse_boundary_str(&text, domain)
}

pub fn parse_boundary_str(text: &str, domain: &Domain) -> Result<BoundaryPolyline> {
    let root: serde_json::Value =
        serde_json::from_str(text).map_err(|e| EtasError::BoundaryParse(e.to_string()))?;
    let features: Vec<&serde_json::Value> = match root.get("type").and_then(|t| t.as_str()) {
        Some("FeatureCollection") => root
            .get("features")
            .and_then(|f| f.as_array())
            .ok_or_else(|| EtasError::BoundaryParse("FeatureCollection without features".into()))?
            .iter()
            .collect(),
        Some("Feature") => vec![&root],
        Some("LineString") | Some("MultiLineString") => vec![&root],
        Some(other) => {
            return Err(EtasError::BoundaryParse(format!(
                "unsupported GeoJSON root type `{other}`"
            )))
        }
        None => return Err(EtasError::BoundaryParse("missing `type`".into())),
    };

    let mut segments = Vec::new();
    for feature in features {
        let (geometry, subducting) = if feature.get("type").and_then(|t| t.as_str()) == Some("Feature")
        {
            let geom = feature
                .get("geometry")
                .ok_or_else(|| EtasError::BoundaryParse("feature without geometry".into()))?;
            (geom, is_subducting(feature.get("properties")))
        } else {
            (feature, false)
        };
        if geometry.is_null() {
            continue;
        }
        let kind = geometry
            .get("type")
            .and_then(|t| t.as_str())
            .ok_or_else(|| EtasError::BoundaryParse("geometry without `type`".into()))?;
        let coords = geometry
            .get("coordinates")
            .ok_or_else(|| EtasError::BoundaryParse("geometry without coordinates".into()))?;
        let lines: Vec<Vec<(f64, f64)>> = match kind {
            "LineString" => vec![parse_line(coords)?],
            "MultiLineString" => coords
                .as_array()
                .ok_or_else(|| EtasError::BoundaryParse("MultiLineString not an array".into()))?
                .iter()
                .map(parse_line)
                .collect::<Result<_>>()?,
            _ => continue,
        };
        for line in lines {
            for w in line.windows(2) {
                let seg = Segment {
                    start: w[0],
                    end: w[1],
                    subducting,
                };
                let (mx, my) = seg.midpoint();
                if seg.length() > 0.0 && domain.contains(mx, my) {
                    segments.push(seg);
                }
            }
        }
    }
    if segments.is_empty() {
        return Err(EtasError::EmptyPolyline);
    }
    Ok(BoundaryPolyline { segments })
}

fn parse_line(coords: &serde_json::Value) -> Result<Vec<(f64, f64)>> {
    let arr = coords
        .as_array()
        .ok_or_else(|| EtasError::BoundaryParse("LineString coordinates not an array".into()))?;
    arr.iter()
        .map(|p| {
            let pair = p.as_array().filter(|a| a.len() >= 2);
            match pair.and_then(|a| Some((a[0].as_f64()?, a[1].as_f64()?))) {
                Some(v) => Ok(v),
                None => Err(EtasError::BoundaryParse(format!("bad position {p}"))),
            }
        })
        .collect()
}

// Plate-boundary datasets label subduction zones in a handful of ways
// ("Type": "subduction", "STEPCLASS": "SUB", ...); any string property
// mentioning subduction counts.
fn is_subducting(props: Option<&serde_json::Value>) -> bool {
    let Some(obj) = props.and_then(|p| p.as_object()) else {
        return false;
    };
    if let Some(flag) = obj.get("subducting").and_then(|v| v.as_bool()) {
        return flag;
    }
    obj.values().any(|v| {
        v.as_str()
            .map(|s| {
                let s = s.to_ascii_lowercase();
                s.starts_with("sub") || s.contains("subduction")
            })
            .unwrap_or(false)
    })
}
