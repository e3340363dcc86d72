//! Trip-record and POI ingestion, and construction of driver sequences.
//!
//! A driver sequence is an alternating pick-up/drop-off history of up to
//! `k / 2` previous trips of one driver, followed by the pick-up of the trip
//! to predict. Histories never cross a shift boundary, which is any gap larger
//! than `max_gap_hours` between the drop-off of one trip and the next pick-up.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Datelike, NaiveDate, Timelike};
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{Coordinate, SpatioTemporalPoint};

/// Seconds between consecutive samples of a polyline trace.
pub const POLYLINE_SAMPLE_SECONDS: i64 = 15;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("line {line}: {reason}")]
    Line { line: usize, reason: String },
    #[error("unknown timezone {0:?}")]
    Timezone(String),
    #[error("invalid sequence record on line {line}: {reason}")]
    Sequence { line: usize, reason: String },
    #[error("k must be even and at least 2, got {0}")]
    InvalidWindow(usize),
}

impl IngestError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        IngestError::Io { path: path.display().to_string(), source }
    }
}

/// Supported raw trip layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripFormat {
    /// `driver_id,start_time,polyline[,day_type][,call_type]`, polyline as `[[lon,lat],...]`.
    PolylineCsv,
    /// `driver_id,start_time,pickup_lat,pickup_lon,dropoff_lat,dropoff_lon[,dropoff_time]`.
    OdCsv,
}

impl FromStr for TripFormat {
    type Err = IngestError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "polyline_csv" => Ok(TripFormat::PolylineCsv),
            "od_csv" => Ok(TripFormat::OdCsv),
            other => Err(IngestError::Schema(format!(
                "unknown trip format {other:?} (expected polyline_csv or od_csv)"
            ))),
        }
    }
}

impl fmt::Display for TripFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TripFormat::PolylineCsv => "polyline_csv",
            TripFormat::OdCsv => "od_csv",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripRecord {
    pub driver_id: String,
    pub start_time: i64,
    /// Drop-off time. Derived from the polyline sampling interval, or read
    /// from the optional `dropoff_time` column, and always after `start_time`.
    pub end_time: i64,
    pub pickup: Coordinate,
    pub dropoff: Coordinate,
    pub raw_polyline: Option<Vec<Coordinate>>,
    pub metadata: BTreeMap<String, String>,
}

impl TripRecord {
    pub fn duration_s(&self) -> i64 {
        self.end_time - self.start_time
    }
}

/// A rejected input row along with the reason.
#[derive(Debug, Clone, PartialEq)]
pub struct RowReject {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedTrips {
    pub records: Vec<TripRecord>,
    pub rejects: Vec<RowReject>,
}

pub fn parse_trips(path: &Path, format: TripFormat) -> Result<ParsedTrips, IngestError> {
    let file = std::fs::File::open(path).map_err(|e| IngestError::io(path, e))?;
    parse_trips_from_reader(BufReader::new(file), format)
}

pub fn parse_trips_from_reader<R: Read>(
    reader: R,
    format: TripFormat,
) -> Result<ParsedTrips, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| IngestError::Schema(format!("unreadable header: {e}")))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let require = |name: &str| {
        col(name).ok_or_else(|| IngestError::Schema(format!("missing column {name:?} for {format}")))
    };

    let driver = require("driver_id")?;
    let start = require("start_time")?;
    let layout = match format {
        TripFormat::PolylineCsv => Layout::Polyline {
            polyline: require("polyline")?,
            day_type: col("day_type"),
            call_type: col("call_type"),
        },
        TripFormat::OdCsv => Layout::Od {
            pickup_lat: require("pickup_lat")?,
            pickup_lon: require("pickup_lon")?,
            dropoff_lat: require("dropoff_lat")?,
            dropoff_lon: require("dropoff_lon")?,
            dropoff_time: col("dropoff_time"),
            day_type: col("day_type"),
        },
    };

    let mut out = ParsedTrips::default();
    for (idx, row) in rdr.records().enumerate() {
        // header is line 1
        let line = idx + 2;
        let parsed = row
            .map_err(|e| e.to_string())
            .and_then(|row| parse_trip_row(&row, driver, start, &layout));
        match parsed {
            Ok(rec) => out.records.push(rec),
            Err(reason) => out.rejects.push(RowReject { line, reason }),
        }
    }
    Ok(out)
}

enum Layout {
    Polyline { polyline: usize, day_type: Option<usize>, call_type: Option<usize> },
    Od {
        pickup_lat: usize,
        pickup_lon: usize,
        dropoff_lat: usize,
        dropoff_lon: usize,
        dropoff_time: Option<usize>,
        day_type: Option<usize>,
    },
}

fn field<'r>(row: &'r csv::StringRecord, idx: usize, name: &str) -> Result<&'r str, String> {
    row.get(idx).ok_or_else(|| format!("missing field {name}"))
}

fn number<T: FromStr>(row: &csv::StringRecord, idx: usize, name: &str) -> Result<T, String> {
    let raw = field(row, idx, name)?;
    raw.parse::<T>().map_err(|_| format!("{name}: cannot parse {raw:?}"))
}

fn parse_trip_row(
    row: &csv::StringRecord,
    driver: usize,
    start: usize,
    layout: &Layout,
) -> Result<TripRecord, String> {
    let driver_id = field(row, driver, "driver_id")?.to_string();
    if driver_id.is_empty() {
        return Err("empty driver_id".into());
    }
    let start_time: i64 = number(row, start, "start_time")?;
    let mut metadata = BTreeMap::new();
    let mut put_meta = |key: &str, idx: Option<usize>| {
        if let Some(v) = idx.and_then(|i| row.get(i)).filter(|v| !v.is_empty()) {
            metadata.insert(key.to_string(), v.to_string());
        }
    };

    match *layout {
        Layout::Polyline { polyline, day_type, call_type } => {
            put_meta("day_type", day_type);
            put_meta("call_type", call_type);
            let points = parse_polyline(field(row, polyline, "polyline")?)?;
            if points.len() < 2 {
                return Err(format!("polyline has {} point(s), need at least 2", points.len()));
            }
            let steps = i64::try_from(points.len() - 1).map_err(|_| "polyline too long")?;
            let end_time = start_time
                .checked_add(steps.saturating_mul(POLYLINE_SAMPLE_SECONDS))
                .ok_or("start_time overflows")?;
            Ok(TripRecord {
                driver_id,
                start_time,
                end_time,
                pickup: points[0],
                dropoff: points[points.len() - 1],
                raw_polyline: Some(points),
                metadata,
            })
        }
        Layout::Od { pickup_lat, pickup_lon, dropoff_lat, dropoff_lon, dropoff_time, day_type } => {
            put_meta("day_type", day_type);
            let coord = |lat_idx, lon_idx, what: &str| -> Result<Coordinate, String> {
                let lat: f64 = number(row, lat_idx, &format!("{what}_lat"))?;
                let lon: f64 = number(row, lon_idx, &format!("{what}_lon"))?;
                Coordinate::new(lat, lon).map_err(|e| format!("{what}: {e}"))
            };
            let pickup = coord(pickup_lat, pickup_lon, "pickup")?;
            let dropoff = coord(dropoff_lat, dropoff_lon, "dropoff")?;
            let end_time = match dropoff_time.and_then(|i| row.get(i)).filter(|v| !v.is_empty()) {
                Some(raw) => {
                    let t: i64 = raw.parse().map_err(|_| format!("dropoff_time: cannot parse {raw:?}"))?;
                    if t <= start_time {
                        return Err("dropoff_time must be after start_time".into());
                    }
                    t
                }
                None => start_time.checked_add(1).ok_or("start_time overflows")?,
            };
            Ok(TripRecord {
                driver_id,
                start_time,
                end_time,
                pickup,
                dropoff,
                raw_polyline: None,
                metadata,
            })
        }
    }
}

/// Parses a `[[lon, lat], ...]` trace.
pub fn parse_polyline(raw: &str) -> Result<Vec<Coordinate>, String> {
    let pairs: Vec<[f64; 2]> =
        serde_json::from_str(raw).map_err(|e| format!("polyline is not a list of [lon, lat]: {e}"))?;
    pairs
        .into_iter()
        .map(|[lon, lat]| Coordinate::new(lat, lon).map_err(|e| format!("polyline point: {e}")))
        .collect()
}

/// Keeps only the trips of the `n` drivers with the most trips (ties broken by
/// driver id), preserving input order.
pub fn select_top_drivers(trips: Vec<TripRecord>, n: usize) -> Vec<TripRecord> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &trips {
        *counts.entry(t.driver_id.as_str()).or_default() += 1;
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let keep: BTreeSet<String> = ranked.into_iter().take(n).map(|(d, _)| d.to_string()).collect();
    trips.into_iter().filter(|t| keep.contains(&t.driver_id)).collect()
}

// ---------------------------------------------------------------------------
// temporal metadata

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TemporalMeta {
    /// Hour of day, 0..=23.
    pub hour: u8,
    /// Monday = 0 .. Sunday = 6.
    pub weekday: u8,
    /// 0 workday, 1 pre-holiday, 2 holiday (weekends included).
    pub day_type: u8,
}

impl TemporalMeta {
    pub fn is_valid(&self) -> bool {
        self.hour < 24 && self.weekday < 7 && self.day_type < 3
    }
}

/// Dates treated as holidays in addition to weekends.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HolidayCalendar {
    dates: BTreeSet<NaiveDate>,
}

impl HolidayCalendar {
    pub fn weekends_only() -> Self {
        Self::default()
    }

    pub fn from_dates<I: IntoIterator<Item = NaiveDate>>(dates: I) -> Self {
        HolidayCalendar { dates: dates.into_iter().collect() }
    }

    /// One ISO-8601 date per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, IngestError> {
        let mut dates = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let date = NaiveDate::parse_from_str(line, "%Y-%m-%d")
                .map_err(|e| IngestError::Line { line: i + 1, reason: format!("{line:?}: {e}") })?;
            dates.insert(date);
        }
        Ok(HolidayCalendar { dates })
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text = std::fs::read_to_string(path).map_err(|e| IngestError::io(path, e))?;
        Self::parse(&text)
    }

    fn is_holiday_type(&self, date: NaiveDate) -> bool {
        date.weekday().num_days_from_monday() >= 5 || self.dates.contains(&date)
    }

    pub fn day_type(&self, date: NaiveDate) -> u8 {
        if self.is_holiday_type(date) {
            2
        } else if date.succ_opt().is_some_and(|next| self.is_holiday_type(next)) {
            1
        } else {
            0
        }
    }
}

pub fn parse_timezone(name: &str) -> Result<Tz, IngestError> {
    name.parse::<Tz>().map_err(|_| IngestError::Timezone(name.to_string()))
}

/// Hour, weekday and day type of an epoch timestamp in the given timezone.
pub fn derive_temporal_meta(t: i64, calendar: &HolidayCalendar, tz: Tz) -> TemporalMeta {
    let utc = DateTime::from_timestamp(t, 0).unwrap_or_default();
    let local = utc.with_timezone(&tz);
    TemporalMeta {
        hour: local.hour() as u8,
        weekday: local.weekday().num_days_from_monday() as u8,
        day_type: calendar.day_type(local.date_naive()),
    }
}

/// Day type supplied by the dataset itself: Porto-style `A`/`B`/`C` letters or
/// the digits `0`/`1`/`2`.
fn native_day_type(meta: &BTreeMap<String, String>) -> Option<u8> {
    match meta.get("day_type").map(|s| s.trim()) {
        Some("A") | Some("0") => Some(0),
        Some("C") | Some("1") => Some(1),
        Some("B") | Some("2") => Some(2),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// sequences

/// One prediction sample: the recent alternating pick-up/drop-off history of a
/// driver, the pick-up of the trip being predicted, and its drop-off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverSequence {
    pub sample_id: u64,
    pub driver_id: String,
    pub history: Vec<SpatioTemporalPoint>,
    pub current_pickup: SpatioTemporalPoint,
    pub target: Option<Coordinate>,
    /// Metadata of the current pick-up.
    pub temporal_meta: TemporalMeta,
    /// Metadata for every point of `history` followed by `current_pickup`.
    pub step_meta: Vec<TemporalMeta>,
    /// Raw GPS trace of the most recent trip in `history`, when the dataset has
    /// one. The trace of the trip being predicted is never stored.
    pub last_trip_polyline: Option<Vec<Coordinate>>,
}

impl DriverSequence {
    /// History followed by the current pick-up.
    pub fn points(&self) -> impl Iterator<Item = &SpatioTemporalPoint> + '_ {
        self.history.iter().chain(std::iter::once(&self.current_pickup))
    }

    pub fn len(&self) -> usize {
        self.history.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Checks the structural invariants: even history of at most `k` points,
    /// non-decreasing timestamps, gaps of at most `max_gap_s`, and metadata
    /// aligned with the points.
    pub fn check(&self, k: usize, max_gap_s: i64) -> Result<(), String> {
        if !self.history.len().is_multiple_of(2) {
            return Err(format!("history length {} is odd", self.history.len()));
        }
        if self.history.len() > k {
            return Err(format!("history length {} exceeds k = {k}", self.history.len()));
        }
        if self.step_meta.len() != self.len() {
            return Err(format!(
                "step_meta has {} entries for {} points",
                self.step_meta.len(),
                self.len()
            ));
        }
        if !self.temporal_meta.is_valid() || self.step_meta.iter().any(|m| !m.is_valid()) {
            return Err("temporal metadata out of range".into());
        }
        if self.step_meta.last() != Some(&self.temporal_meta) {
            return Err("temporal_meta differs from the current pick-up step".into());
        }
        let pts: Vec<_> = self.points().collect();
        for (i, w) in pts.windows(2).enumerate() {
            let gap = w[1].t.checked_sub(w[0].t).ok_or("timestamp overflow")?;
            // within a trip the drop-off is strictly after the pick-up
            if gap < 0 || (i % 2 == 0 && gap == 0) {
                return Err(format!("points {i} and {} out of time order", i + 1));
            }
            if gap > max_gap_s {
                return Err(format!("gap of {gap} s between points {i} and {}", i + 1));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SequenceOptions {
    /// History length in points (pick-ups plus drop-offs); must be even.
    pub k: usize,
    pub max_gap_hours: f64,
    pub timezone: Tz,
    pub holidays: HolidayCalendar,
}

impl Default for SequenceOptions {
    fn default() -> Self {
        SequenceOptions {
            k: 8,
            max_gap_hours: 3.0,
            timezone: Tz::UTC,
            holidays: HolidayCalendar::weekends_only(),
        }
    }
}

impl SequenceOptions {
    pub fn max_gap_s(&self) -> i64 {
        (self.max_gap_hours * 3600.0).round() as i64
    }
}

/// Groups trips per driver, orders them by start time, splits them into shifts
/// and emits one sample per trip that has at least one earlier trip in its
/// shift. Output is ordered by driver id, then time.
pub fn build_sequences(
    trips: impl IntoIterator<Item = TripRecord>,
    opts: &SequenceOptions,
) -> Result<Vec<DriverSequence>, IngestError> {
    if opts.k < 2 || !opts.k.is_multiple_of(2) {
        return Err(IngestError::InvalidWindow(opts.k));
    }
    let max_pairs = opts.k / 2;
    let max_gap = opts.max_gap_s();

    let mut by_driver: BTreeMap<String, Vec<TripRecord>> = BTreeMap::new();
    for t in trips {
        by_driver.entry(t.driver_id.clone()).or_default().push(t);
    }

    let meta_for = |trip: &TripRecord, t: i64| {
        let mut m = derive_temporal_meta(t, &opts.holidays, opts.timezone);
        if let Some(dt) = native_day_type(&trip.metadata) {
            m.day_type = dt;
        }
        m
    };

    let mut out = Vec::new();
    for (driver_id, mut trips) in by_driver {
        // stable: equal start times keep input order
        trips.sort_by_key(|t| t.start_time);
        let mut shift_start = 0usize;
        for j in 0..trips.len() {
            if j > 0 && !continues_shift(&trips[j - 1], &trips[j], max_gap) {
                shift_start = j;
            }
            if j == shift_start {
                continue;
            }
            let first = j.saturating_sub(max_pairs).max(shift_start);
            let mut history = Vec::with_capacity(2 * (j - first));
            let mut step_meta = Vec::with_capacity(2 * (j - first) + 1);
            for prev in &trips[first..j] {
                history.push(SpatioTemporalPoint::new(prev.start_time, prev.pickup));
                history.push(SpatioTemporalPoint::new(prev.end_time, prev.dropoff));
                step_meta.push(meta_for(prev, prev.start_time));
                step_meta.push(meta_for(prev, prev.end_time));
            }
            let cur = &trips[j];
            let temporal_meta = meta_for(cur, cur.start_time);
            step_meta.push(temporal_meta);
            out.push(DriverSequence {
                sample_id: out.len() as u64,
                driver_id: driver_id.clone(),
                history,
                current_pickup: SpatioTemporalPoint::new(cur.start_time, cur.pickup),
                target: Some(cur.dropoff),
                temporal_meta,
                step_meta,
                last_trip_polyline: trips[j - 1].raw_polyline.clone(),
            });
        }
    }
    Ok(out)
}

/// Whether `next` belongs to the same shift as `prev`: `prev` itself lasts no
/// longer than the gap limit and `next` starts between zero and `max_gap_s`
/// seconds after `prev` ends.
fn continues_shift(prev: &TripRecord, next: &TripRecord, max_gap_s: i64) -> bool {
    let idle = next.start_time.saturating_sub(prev.end_time);
    prev.duration_s() <= max_gap_s && (0..=max_gap_s).contains(&idle)
}

/// Writes one JSON object per line.
pub fn write_sequences<W: Write>(mut w: W, seqs: &[DriverSequence]) -> std::io::Result<()> {
    for s in seqs {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Reads a JSON-lines sequence file, validating every record's structure.
pub fn read_sequences<R: Read>(reader: R) -> Result<Vec<DriverSequence>, IngestError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| IngestError::Sequence { line: i + 1, reason: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let seq: DriverSequence = serde_json::from_str(&line)
            .map_err(|e| IngestError::Sequence { line: i + 1, reason: e.to_string() })?;
        seq.check(usize::MAX, i64::MAX)
            .map_err(|reason| IngestError::Sequence { line: i + 1, reason })?;
        out.push(seq);
    }
    Ok(out)
}

pub fn load_sequences(path: &Path) -> Result<Vec<DriverSequence>, IngestError> {
    let file = std::fs::File::open(path).map_err(|e| IngestError::io(path, e))?;
    read_sequences(file)
}

// ---------------------------------------------------------------------------
// POIs

/// The ten top-level venue categories, in their canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MacroCategory {
    ArtsEntertainment,
    CollegeUniversity,
    Event,
    Food,
    NightlifeSpot,
    OutdoorsRecreation,
    ProfessionalOther,
    Residence,
    ShopService,
    TravelTransport,
}

impl MacroCategory {
    pub const ALL: [MacroCategory; 10] = [
        MacroCategory::ArtsEntertainment,
        MacroCategory::CollegeUniversity,
        MacroCategory::Event,
        MacroCategory::Food,
        MacroCategory::NightlifeSpot,
        MacroCategory::OutdoorsRecreation,
        MacroCategory::ProfessionalOther,
        MacroCategory::Residence,
        MacroCategory::ShopService,
        MacroCategory::TravelTransport,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            MacroCategory::ArtsEntertainment => "Arts and Entertainment",
            MacroCategory::CollegeUniversity => "College and University",
            MacroCategory::Event => "Event",
            MacroCategory::Food => "Food",
            MacroCategory::NightlifeSpot => "Nightlife Spot",
            MacroCategory::OutdoorsRecreation => "Outdoors and Recreation",
            MacroCategory::ProfessionalOther => "Professional and Other Places",
            MacroCategory::Residence => "Residence",
            MacroCategory::ShopService => "Shop and Service",
            MacroCategory::TravelTransport => "Travel and Transport",
        }
    }

    /// Matches a category name case-insensitively, accepting `&` for `and`.
    pub fn from_name(raw: &str) -> Option<Self> {
        let norm = normalize_category(raw);
        Self::ALL.into_iter().find(|c| normalize_category(c.name()) == norm)
    }
}

fn normalize_category(s: &str) -> String {
    s.to_lowercase()
        .replace('&', " and ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Poi {
    pub loc: Coordinate,
    pub macro_category: MacroCategory,
    pub name: String,
    pub category_path: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedPois {
    pub pois: Vec<Poi>,
    pub rejects: Vec<RowReject>,
}

pub fn parse_pois(path: &Path) -> Result<ParsedPois, IngestError> {
    let text = std::fs::read_to_string(path).map_err(|e| IngestError::io(path, e))?;
    Ok(parse_pois_str(&text))
}

/// Parses `lat,lon,name,path` lines where `path` is joined by `" → "`. An
/// optional leading `lat,...` header line is skipped. Names containing commas
/// must be quoted.
pub fn parse_pois_str(text: &str) -> ParsedPois {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = ParsedPois::default();
    for (idx, row) in rdr.records().enumerate() {
        let line = idx + 1;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                out.rejects.push(RowReject { line, reason: e.to_string() });
                continue;
            }
        };
        if row.iter().all(str::is_empty) {
            continue;
        }
        if line == 1 && row.get(0).is_some_and(|f| f.eq_ignore_ascii_case("lat")) {
            continue;
        }
        match parse_poi_row(&row) {
            Ok(p) => out.pois.push(p),
            Err(reason) => out.rejects.push(RowReject { line, reason }),
        }
    }
    out
}

fn parse_poi_row(row: &csv::StringRecord) -> Result<Poi, String> {
    if row.len() != 4 {
        return Err(format!("expected 4 fields (lat, lon, name, path), found {}", row.len()));
    }
    let lat: f64 = number(row, 0, "lat")?;
    let lon: f64 = number(row, 1, "lon")?;
    let loc = Coordinate::new(lat, lon).map_err(|e| e.to_string())?;
    let category_path: Vec<String> = row[3]
        .split('→')
        .flat_map(|s| s.split("->"))
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    let root = category_path.first().ok_or("empty category path")?;
    let macro_category =
        MacroCategory::from_name(root).ok_or_else(|| format!("unknown macro-category {root:?}"))?;
    Ok(Poi { loc, macro_category, name: row[2].to_string(), category_path })
}

/// Whole hours in seconds.
pub const fn hours(h: i64) -> i64 {
    h * 3600
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(lat: f64, lon: f64) -> Coordinate {
        Coordinate::new(lat, lon).unwrap()
    }

    fn trip(driver: &str, start: i64, dur: i64, p: (f64, f64), d: (f64, f64)) -> TripRecord {
        TripRecord {
            driver_id: driver.into(),
            start_time: start,
            end_time: start + dur,
            pickup: c(p.0, p.1),
            dropoff: c(d.0, d.1),
            raw_polyline: None,
            metadata: BTreeMap::new(),
        }
    }

    // 2024-01-01 is a Monday.
    const MONDAY_0930_UTC: i64 = 1_704_101_400;

    #[test]
    fn polyline_rows() {
        let csv = "driver_id,start_time,polyline,day_type,call_type\n\
                   7,1372636858,\"[[-8.618643,41.141412],[-8.618499,41.141376],[-8.620326,41.14251]]\",A,C\n\
                   7,1372637303,\"[[-8.639847,41.159826],[-8.640351,41.159871]]\",A,B\n\
                   9,1372636951,\"[[-8.612964,41.140359],[-8.613378,41.14035],[-8.614215,41.140278]]\",A,C\n";
        let parsed = parse_trips_from_reader(csv.as_bytes(), TripFormat::PolylineCsv).unwrap();
        assert_eq!(parsed.records.len(), 3);
        assert!(parsed.rejects.is_empty());
        let r = &parsed.records[0];
        assert_eq!(r.pickup, c(41.141412, -8.618643));
        assert_eq!(r.dropoff, c(41.14251, -8.620326));
        assert_eq!(r.end_time, 1372636858 + 30);
        assert_eq!(r.metadata["call_type"], "C");
        let poly = r.raw_polyline.as_ref().unwrap();
        assert_eq!((poly[0], poly[2]), (r.pickup, r.dropoff));
    }

    #[test]
    fn empty_polyline_rejected() {
        let csv = "driver_id,start_time,polyline\n1,100,[]\n1,200,\"[[1,2]]\"\n1,300,\"[[1,2],[1,3]]\"\n";
        let parsed = parse_trips_from_reader(csv.as_bytes(), TripFormat::PolylineCsv).unwrap();
        assert_eq!(parsed.records.len(), 1);
        assert_eq!(parsed.rejects.len(), 2);
        assert_eq!(parsed.rejects[0].line, 2);
        assert!(parsed.rejects[0].reason.contains("0 point"));
    }

    #[test]
    fn od_rows_and_schema() {
        let csv = "driver_id,start_time,pickup_lat,pickup_lon,dropoff_lat,dropoff_lon\n\
                   a,10,40.75,-73.99,40.76,-73.98\n\
                   a,20,95.0,-73.99,40.76,-73.98\n\
                   a,oops,40.75,-73.99,40.76,-73.98\n";
        let parsed = parse_trips_from_reader(csv.as_bytes(), TripFormat::OdCsv).unwrap();
        assert_eq!(parsed.records.len(), 1);
        assert_eq!(parsed.records[0].end_time, 11);
        assert_eq!(parsed.rejects.len(), 2);

        let bad = "driver_id,start_time,pickup_lat\n";
        assert!(matches!(
            parse_trips_from_reader(bad.as_bytes(), TripFormat::OdCsv),
            Err(IngestError::Schema(_))
        ));
    }

    #[test]
    fn two_trips_half_hour_apart() {
        let trips = vec![
            trip("d", 0, 600, (41.1, -8.6), (41.2, -8.6)),
            trip("d", 1800, 600, (41.2, -8.6), (41.1, -8.6)),
        ];
        let seqs = build_sequences(trips, &SequenceOptions::default()).unwrap();
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].history.len(), 2);
        assert_eq!(seqs[0].target, Some(c(41.1, -8.6)));
    }

    #[test]
    fn shift_break_after_four_hours() {
        let trips = vec![
            trip("d", 0, 600, (41.1, -8.6), (41.2, -8.6)),
            trip("d", hours(4), 600, (41.2, -8.6), (41.1, -8.6)),
        ];
        assert!(build_sequences(trips, &SequenceOptions::default()).unwrap().is_empty());
    }

    #[test]
    fn six_hourly_trips() {
        let trips: Vec<_> = (0..6)
            .map(|i| trip("d", hours(i), 900, (41.1, -8.6), (41.15, -8.62)))
            .collect();
        let seqs = build_sequences(trips, &SequenceOptions::default()).unwrap();
        let lens: Vec<_> = seqs.iter().map(|s| s.history.len()).collect();
        assert_eq!(lens, vec![2, 4, 6, 8, 8]);
        for s in &seqs {
            s.check(8, hours(3)).unwrap();
        }
        // the last sample's history starts at trip 1
        assert_eq!(seqs[4].history[0].t, hours(1));
    }

    #[test]
    fn odd_k_rejected() {
        let opts = SequenceOptions { k: 7, ..Default::default() };
        assert!(matches!(build_sequences(vec![], &opts), Err(IngestError::InvalidWindow(7))));
    }

    #[test]
    fn temporal_meta_rules() {
        let cal = HolidayCalendar::weekends_only();
        let m = derive_temporal_meta(MONDAY_0930_UTC, &cal, Tz::UTC);
        assert_eq!((m.hour, m.weekday, m.day_type), (9, 0, 0));
        let saturday = MONDAY_0930_UTC + 5 * 86_400;
        assert_eq!(derive_temporal_meta(saturday, &cal, Tz::UTC).day_type, 2);
        let friday = MONDAY_0930_UTC + 4 * 86_400;
        assert_eq!(derive_temporal_meta(friday, &cal, Tz::UTC).day_type, 1);
        // Wednesday 2024-01-03 declared a holiday makes Tuesday pre-holiday
        let cal = HolidayCalendar::parse("# test\n2024-01-03\n").unwrap();
        assert_eq!(derive_temporal_meta(MONDAY_0930_UTC + 86_400, &cal, Tz::UTC).day_type, 1);
        assert_eq!(derive_temporal_meta(MONDAY_0930_UTC + 2 * 86_400, &cal, Tz::UTC).day_type, 2);
        // local time: 09:30 UTC in January is 09:30 in Lisbon, 10:30 in Madrid
        let madrid = parse_timezone("Europe/Madrid").unwrap();
        assert_eq!(derive_temporal_meta(MONDAY_0930_UTC, &cal, madrid).hour, 10);
        assert!(HolidayCalendar::parse("2024-13-01").is_err());
    }

    #[test]
    fn native_day_type_overrides_calendar() {
        let mut t1 = trip("d", MONDAY_0930_UTC, 600, (41.1, -8.6), (41.2, -8.6));
        t1.metadata.insert("day_type".into(), "B".into());
        let mut t2 = trip("d", MONDAY_0930_UTC + 1200, 600, (41.2, -8.6), (41.1, -8.6));
        t2.metadata.insert("day_type".into(), "C".into());
        let seqs = build_sequences(vec![t1, t2], &SequenceOptions::default()).unwrap();
        assert_eq!(seqs[0].step_meta[0].day_type, 2);
        assert_eq!(seqs[0].temporal_meta.day_type, 1);
    }

    #[test]
    fn poi_lines() {
        let text = "lat,lon,name,path\n\
                    41.15,-8.61,Jade Garden,Food → Asian Restaurant → Chinese Restaurant\n\
                    41.16,-8.62,\"Bar, Ribeira\",Nightlife Spot → Bar\n\
                    41.17,-8.63,Somewhere,Spaceports → Launch Pad\n\
                    41.18,-8.64,Clinic,Professional & Other Places -> Medical Center\n";
        let parsed = parse_pois_str(text);
        assert_eq!(parsed.pois.len(), 3);
        assert_eq!(parsed.pois[0].macro_category, MacroCategory::Food);
        assert_eq!(parsed.pois[0].category_path.len(), 3);
        assert_eq!(parsed.pois[1].name, "Bar, Ribeira");
        assert_eq!(parsed.pois[2].macro_category, MacroCategory::ProfessionalOther);
        assert_eq!(parsed.rejects.len(), 1);
        assert!(parsed.rejects[0].reason.contains("Spaceports"));
        assert!(parse_pois_str("").pois.is_empty());
    }

    #[test]
    fn top_drivers() {
        let trips = vec![
            trip("a", 0, 1, (0.0, 0.0), (0.0, 0.1)),
            trip("b", 0, 1, (0.0, 0.0), (0.0, 0.1)),
            trip("b", 5, 1, (0.0, 0.0), (0.0, 0.1)),
            trip("c", 0, 1, (0.0, 0.0), (0.0, 0.1)),
        ];
        let kept = select_top_drivers(trips, 2);
        let ids: Vec<_> = kept.iter().map(|t| t.driver_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b", "b"]);
    }

    #[test]
    fn sequence_file_round_trip() {
        let trips: Vec<_> = (0..3)
            .map(|i| trip("d", hours(i), 900, (41.1, -8.6), (41.15, -8.62)))
            .collect();
        let seqs = build_sequences(trips, &SequenceOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_sequences(&mut buf, &seqs).unwrap();
        assert_eq!(read_sequences(buf.as_slice()).unwrap(), seqs);
        assert!(read_sequences("{\"nope\":1}\n".as_bytes()).is_err());
    }
}
