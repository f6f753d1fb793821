//! Check-in loading, trajectory segmentation, hour-of-week binning and the
//! train/validation/test split.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Number of hour-of-week bins.
pub const N_BINS: usize = 168;
pub const SECONDS_PER_WEEK: i64 = 604_800;

pub const CSV_HEADER: [&str; 6] = ["user_id", "poi_id", "timestamp", "lat", "lon", "category"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckIn {
    pub user_id: usize,
    pub poi_id: usize,
    /// UTC seconds since the epoch.
    pub timestamp: i64,
    pub lat: f64,
    pub lon: f64,
    pub category_id: usize,
}

/// String id to dense index, in order of first appearance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.names.len();
        self.names.push(name.to_owned());
        self.index.insert(name.to_owned(), i);
        i
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub checkins: Vec<CheckIn>,
    pub users: Vocab,
    pub pois: Vocab,
    pub categories: Vocab,
}

pub fn load_checkins(path: &Path) -> Result<Corpus> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_checkins(file, path)
}

/// Parses the check-in CSV. `path` is used only in error messages.
pub fn parse_checkins<R: Read>(input: R, path: &Path) -> Result<Corpus> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);

    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(parse_err(
            1,
            format!("expected header `{}`", CSV_HEADER.join(",")),
        ));
    }

    let mut corpus = Corpus::default();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 6 {
            return Err(parse_err(line, format!("expected 6 fields, got {}", rec.len())));
        }
        let timestamp: i64 = rec[2]
            .parse()
            .map_err(|_| parse_err(line, format!("bad timestamp `{}`", &rec[2])))?;
        let lat: f64 = rec[3]
            .parse()
            .map_err(|_| parse_err(line, format!("bad latitude `{}`", &rec[3])))?;
        let lon: f64 = rec[4]
            .parse()
            .map_err(|_| parse_err(line, format!("bad longitude `{}`", &rec[4])))?;
        if timestamp < 0 {
            return Err(parse_err(line, format!("negative timestamp {timestamp}")));
        }
        if !(-90.0..=90.0).contains(&lat) {
            return Err(parse_err(line, format!("latitude {lat} outside [-90, 90]")));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(parse_err(line, format!("longitude {lon} outside [-180, 180]")));
        }
        let checkin = CheckIn {
            user_id: corpus.users.intern(&rec[0]),
            poi_id: corpus.pois.intern(&rec[1]),
            timestamp,
            lat,
            lon,
            category_id: corpus.categories.intern(&rec[5]),
        };
        corpus.checkins.push(checkin);
    }
    if corpus.checkins.is_empty() {
        return Err(parse_err(1, "file contains no check-ins".into()));
    }
    Ok(corpus)
}

/// Day of week with Monday = 0, in UTC.
pub fn day_of_week(timestamp: i64) -> usize {
    // 1970-01-01 was a Thursday.
    ((timestamp.div_euclid(86_400) + 3).rem_euclid(7)) as usize
}

pub fn hour_of_day(timestamp: i64) -> usize {
    (timestamp.rem_euclid(86_400) / 3_600) as usize
}

/// Hour-of-week bin in `[0, 168)`.
pub fn time_bin(timestamp: i64) -> usize {
    day_of_week(timestamp) * 24 + hour_of_day(timestamp)
}

/// Assigns check-ins to hour-of-week bins (UTC, Monday 00:00 is bin 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeBinner {
    pub n_bins: usize,
}

impl Default for TimeBinner {
    fn default() -> Self {
        TimeBinner { n_bins: N_BINS }
    }
}

impl TimeBinner {
    pub fn bin(&self, timestamp: i64) -> usize {
        time_bin(timestamp)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub user_id: usize,
    pub steps: Vec<CheckIn>,
    /// Seconds between consecutive steps; `gaps[0] == 0`.
    pub gaps: Vec<i64>,
}

impl Trajectory {
    pub fn new(user_id: usize, steps: Vec<CheckIn>) -> Self {
        let gaps = steps
            .iter()
            .enumerate()
            .map(|(t, s)| if t == 0 { 0 } else { s.timestamp - steps[t - 1].timestamp })
            .collect();
        Trajectory {
            user_id,
            steps,
            gaps,
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn pois(&self) -> impl Iterator<Item = usize> + '_ {
        self.steps.iter().map(|s| s.poi_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentParams {
    pub min_poi_visits: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SegmentParams {
    fn default() -> Self {
        SegmentParams {
            min_poi_visits: 5,
            min_len: 3,
            max_len: 101,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SegmentReport {
    pub removed_pois: usize,
    pub removed_checkins: usize,
    /// Users left with fewer than `min_len` check-ins after filtering.
    pub dropped_users: usize,
    /// Check-ins lost in trailing chunks shorter than `min_len`.
    pub dropped_tail_checkins: usize,
    pub trajectories: usize,
}

/// Removes rarely visited POIs and cuts each user's stream greedily into
/// chunks of `max_len`, dropping a trailing chunk shorter than `min_len`.
///
/// Output is ordered by user index, then time.
pub fn filter_and_segment(
    checkins: &[CheckIn],
    params: SegmentParams,
) -> (Vec<Trajectory>, SegmentReport) {
    let mut report = SegmentReport::default();
    let n_pois = checkins.iter().map(|c| c.poi_id + 1).max().unwrap_or(0);
    let mut visits = vec![0usize; n_pois];
    for c in checkins {
        visits[c.poi_id] += 1;
    }
    report.removed_pois = visits
        .iter()
        .filter(|&&v| v > 0 && v < params.min_poi_visits)
        .count();

    let n_users = checkins.iter().map(|c| c.user_id + 1).max().unwrap_or(0);
    let mut streams: Vec<Vec<CheckIn>> = vec![Vec::new(); n_users];
    for c in checkins {
        if visits[c.poi_id] >= params.min_poi_visits {
            streams[c.user_id].push(*c);
        } else {
            report.removed_checkins += 1;
        }
    }

    let mut out = Vec::new();
    for (user, mut stream) in streams.into_iter().enumerate() {
        if stream.is_empty() {
            continue;
        }
        if stream.len() < params.min_len {
            report.dropped_users += 1;
            continue;
        }
        stream.sort_by_key(|c| c.timestamp);
        for chunk in stream.chunks(params.max_len) {
            if chunk.len() < params.min_len {
                report.dropped_tail_checkins += chunk.len();
                continue;
            }
            out.push(Trajectory::new(user, chunk.to_vec()));
        }
    }
    report.trajectories = out.len();
    (out, report)
}

/// Filtered, re-indexed corpus: POI, user and category ids are dense over
/// the entities that survive filtering.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub poi_coords: Vec<(f64, f64)>,
    pub poi_category: Vec<usize>,
    pub users: Vocab,
    pub pois: Vocab,
    pub categories: Vocab,
}

impl Dataset {
    pub fn from_corpus(corpus: &Corpus, params: SegmentParams) -> (Dataset, SegmentReport) {
        let (trajs, report) = filter_and_segment(&corpus.checkins, params);

        let mut user_map = vec![usize::MAX; corpus.users.len()];
        let mut poi_map = vec![usize::MAX; corpus.pois.len()];
        let mut cat_map = vec![usize::MAX; corpus.categories.len()];
        for t in &trajs {
            user_map[t.user_id] = 0;
            for s in &t.steps {
                poi_map[s.poi_id] = 0;
                cat_map[s.category_id] = 0;
            }
        }
        let compact = |map: &mut [usize], src: &Vocab| {
            let mut v = Vocab::default();
            for (i, slot) in map.iter_mut().enumerate() {
                if *slot == 0 {
                    *slot = v.intern(src.name(i));
                }
            }
            v
        };
        let users = compact(&mut user_map, &corpus.users);
        let pois = compact(&mut poi_map, &corpus.pois);
        let categories = compact(&mut cat_map, &corpus.categories);

        let mut poi_coords = vec![(f64::NAN, f64::NAN); pois.len()];
        let mut poi_category = vec![usize::MAX; pois.len()];
        for c in &corpus.checkins {
            let p = poi_map[c.poi_id];
            if p != usize::MAX && poi_category[p] == usize::MAX {
                poi_coords[p] = (c.lat, c.lon);
                poi_category[p] = cat_map[c.category_id];
            }
        }

        let trajectories = trajs
            .into_iter()
            .map(|t| {
                let steps = t
                    .steps
                    .iter()
                    .map(|s| CheckIn {
                        user_id: user_map[s.user_id],
                        poi_id: poi_map[s.poi_id],
                        category_id: cat_map[s.category_id],
                        ..*s
                    })
                    .collect();
                Trajectory::new(user_map[t.user_id], steps)
            })
            .collect();

        (
            Dataset {
                trajectories,
                poi_coords,
                poi_category,
                users,
                pois,
                categories,
            },
            report,
        )
    }

    pub fn n_pois(&self) -> usize {
        self.pois.len()
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn n_checkins(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }
}

/// Trajectory indices for each part of the split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Target sizes for an 8:1:1 split by largest remainder; ties go to the
/// later part.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let weights = [8usize, 1, 1];
    let mut sizes = weights.map(|w| n * w / 10);
    let mut left = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    // larger remainder first, later index first on ties
    order.sort_by_key(|&i| (std::cmp::Reverse((n * weights[i]) % 10), std::cmp::Reverse(i)));
    for &i in &order {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    (sizes[0], sizes[1], sizes[2])
}

/// Seeded random 8:1:1 split of trajectories.
pub fn split_8_1_1<T>(trajectories: &[T], seed: u64) -> Result<DatasetSplit> {
    let n = trajectories.len();
    if n < 10 {
        return Err(Error::invalid(format!(
            "need at least 10 trajectories to split, got {n}"
        )));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let (a, b, _) = split_sizes(n);
    let mut train = ids[..a].to_vec();
    let mut val = ids[a..a + b].to_vec();
    let mut test = ids[a + b..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(DatasetSplit { train, val, test })
}

impl DatasetSplit {
    pub fn select<'a, T>(ids: &[usize], items: &'a [T]) -> Vec<&'a T> {
        ids.iter().map(|&i| &items[i]).collect()
    }

    pub fn to_manifest(&self) -> String {
        let mut s = String::new();
        for (name, ids) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            let _ = write!(s, "{name}:");
            for id in ids {
                let _ = write!(s, " {id}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut parts: HashMap<&str, Vec<usize>> = HashMap::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (name, rest) = line
                .split_once(':')
                .ok_or_else(|| Error::invalid(format!("split manifest line {}: missing ':'", ln + 1)))?;
            let ids = rest
                .split_whitespace()
                .map(|t| {
                    t.parse::<usize>().map_err(|_| {
                        Error::invalid(format!("split manifest line {}: bad id `{t}`", ln + 1))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            parts.insert(name.trim(), ids);
        }
        let mut take = |k: &str| {
            parts
                .remove(k)
                .ok_or_else(|| Error::invalid(format!("split manifest lacks `{k}`")))
        };
        Ok(DatasetSplit {
            train: take("train")?,
            val: take("val")?,
            test: take("test")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ci(user: usize, poi: usize, ts: i64) -> CheckIn {
        CheckIn {
            user_id: user,
            poi_id: poi,
            timestamp: ts,
            lat: 40.0,
            lon: -73.0,
            category_id: 0,
        }
    }

    #[test]
    fn two_row_file() {
        let text = "user_id,poi_id,timestamp,lat,lon,category\n\
                    u1,p1,100,40.7,-73.9,cafe\n\
                    u1,p2,200,40.8,-73.8,bar\n";
        let c = parse_checkins(text.as_bytes(), Path::new("mem.csv")).unwrap();
        assert_eq!(c.checkins.len(), 2);
        assert_eq!(c.pois.len(), 2);
        assert_eq!(c.checkins[1].poi_id, 1);
        assert_eq!(c.users.len(), 1);
    }

    #[test]
    fn out_of_range_latitude_names_line() {
        let text = "user_id,poi_id,timestamp,lat,lon,category\n\
                    u1,p1,100,40.7,-73.9,cafe\n\
                    u1,p2,200,200,-73.8,bar\n";
        let err = parse_checkins(text.as_bytes(), Path::new("mem.csv")).unwrap_err();
        match err {
            Error::Parse { line, msg, .. } => {
                assert_eq!(line, 3);
                assert!(msg.contains("latitude"));
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn empty_file_and_bad_header() {
        let only_header = "user_id,poi_id,timestamp,lat,lon,category\n";
        assert!(parse_checkins(only_header.as_bytes(), Path::new("x")).is_err());
        assert!(parse_checkins("".as_bytes(), Path::new("x")).is_err());
        let bad = "user,poi,ts,lat,lon,cat\n1,2,3,4,5,6\n";
        assert!(matches!(
            parse_checkins(bad.as_bytes(), Path::new("x")),
            Err(Error::Parse { line: 1, .. })
        ));
        let short_row = "user_id,poi_id,timestamp,lat,lon,category\n1,2,3\n";
        assert!(parse_checkins(short_row.as_bytes(), Path::new("x")).is_err());
    }

    #[test]
    fn bin_conventions() {
        // 1970-01-05 was a Monday.
        let monday = 4 * 86_400;
        assert_eq!(time_bin(monday + 30 * 60), 0);
        assert_eq!(time_bin(monday + 6 * 86_400 + 23 * 3600 + 59 * 60), 167);
        assert_eq!(TimeBinner::default().n_bins, N_BINS);
    }

    #[test]
    fn short_user_dropped_and_rare_poi_removed() {
        let mut cs = vec![ci(0, 0, 10), ci(0, 0, 20)];
        // POI 1 visited 5 times by user 1, POI 2 only 4 times by user 2
        for t in 0..5 {
            cs.push(ci(1, 1, 100 + t));
        }
        for t in 0..4 {
            cs.push(ci(2, 2, 100 + t));
        }
        for t in 0..3 {
            cs.push(ci(2, 1, 200 + t));
        }
        for t in 0..3 {
            cs.push(ci(0, 1, 300 + t));
        }
        let (trajs, report) = filter_and_segment(&cs, SegmentParams::default());
        // user 0 keeps 3 visits to POI 1 only after POI 0 (2 visits) is removed
        assert!(trajs.iter().all(|t| t.pois().all(|p| p == 1)));
        assert_eq!(report.removed_pois, 2);
        assert_eq!(report.removed_checkins, 6);
        assert_eq!(trajs.len(), 3);
    }

    #[test]
    fn segmentation_of_250() {
        let cs: Vec<CheckIn> = (0..250).map(|t| ci(0, 0, t)).collect();
        let (trajs, _) = filter_and_segment(&cs, SegmentParams::default());
        let lens: Vec<usize> = trajs.iter().map(Trajectory::len).collect();
        assert_eq!(lens, vec![101, 101, 48]);
        assert_eq!(trajs[1].steps[0].timestamp, 101);
        assert_eq!(trajs[2].gaps[0], 0);

        // 204 = 101 + 101 + 2, trailing pair is dropped
        let cs: Vec<CheckIn> = (0..204).map(|t| ci(0, 0, t)).collect();
        let (trajs, report) = filter_and_segment(&cs, SegmentParams::default());
        assert_eq!(trajs.len(), 2);
        assert_eq!(report.dropped_tail_checkins, 2);
    }

    #[test]
    fn unsorted_stream_is_sorted() {
        let cs = vec![ci(0, 0, 30), ci(0, 0, 10), ci(0, 0, 20), ci(0, 0, 5), ci(0, 0, 1)];
        let (trajs, _) = filter_and_segment(&cs, SegmentParams::default());
        assert_eq!(trajs[0].gaps, vec![0, 4, 5, 10, 10]);
    }

    #[test]
    fn split_sizes_match_ratio() {
        assert_eq!(split_sizes(10), (8, 1, 1));
        assert_eq!(split_sizes(13_955), (11_164, 1_395, 1_396));
        assert_eq!(split_sizes(19), (15, 2, 2));
        assert!(split_8_1_1(&[0; 9], 1).is_err());
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let items = vec![(); 137];
        let a = split_8_1_1(&items, 7).unwrap();
        let b = split_8_1_1(&items, 7).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..137).collect::<Vec<_>>());
        let c = split_8_1_1(&items, 8).unwrap();
        assert_ne!(a, c);
        assert_eq!(DatasetSplit::from_manifest(&a.to_manifest()).unwrap(), a);
    }

    #[test]
    fn dataset_compacts_ids() {
        let text = "user_id,poi_id,timestamp,lat,lon,category\n".to_string()
            + &(0..5)
                .map(|t| format!("a,x,{},1.0,2.0,c0\na,rare,{},1.0,2.0,c1\na,y,{},1.5,2.5,c2\n", t * 10, t * 10 + 1, t * 10 + 2))
                .collect::<String>()
                .replacen("a,rare,41,1.0,2.0,c1\n", "", 1);
        let corpus = parse_checkins(text.as_bytes(), Path::new("x")).unwrap();
        let (ds, report) = Dataset::from_corpus(&corpus, SegmentParams::default());
        assert_eq!(report.removed_pois, 1);
        assert_eq!(ds.n_pois(), 2);
        assert_eq!(ds.pois.name(1), "y");
        assert_eq!(ds.poi_coords[1], (1.5, 2.5));
        assert_eq!(ds.n_categories(), 2);
        assert!(ds.trajectories.iter().all(|t| t.pois().all(|p| p < 2)));
    }
}
