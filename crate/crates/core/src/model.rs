//! Pages, layouts, access events and the two adversary models.
//!
//! The OS only ever sees virtual page numbers. Offsets inside a page are
//! masked, so everything the adversary learns is captured by the ordered
//! list of faulting pages ([`PageAccessProfile`]).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default page size in bytes.
pub const DEFAULT_PAGE_SIZE: u64 = 4096;

/// x86 needs at most three distinct pages to retire one instruction.
pub const MAX_PAGES_PER_INSTR: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VirtualPage(pub u64);

impl fmt::Display for VirtualPage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.0)
    }
}

/// A contiguous byte range that lives on a single page.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extent {
    pub page: VirtualPage,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Code,
    Data,
}

/// Staging pages reserved by the multiplexing transformation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagingPages {
    pub sa_code: VirtualPage,
    pub sa_data: Vec<VirtualPage>,
}

/// Where every code and data object lives. Objects that straddle a page
/// boundary are stored as one extent per page, in address order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryLayout {
    pub page_size: u64,
    pub code_map: BTreeMap<String, Vec<Extent>>,
    pub data_map: BTreeMap<String, Vec<Extent>>,
    pub staging: Option<StagingPages>,
}

impl MemoryLayout {
    pub fn new(page_size: u64) -> Result<Self> {
        check_page_size(page_size)?;
        Ok(MemoryLayout {
            page_size,
            code_map: BTreeMap::new(),
            data_map: BTreeMap::new(),
            staging: None,
        })
    }

    fn map(&self, region: Region) -> &BTreeMap<String, Vec<Extent>> {
        match region {
            Region::Code => &self.code_map,
            Region::Data => &self.data_map,
        }
    }

    fn map_mut(&mut self, region: Region) -> &mut BTreeMap<String, Vec<Extent>> {
        match region {
            Region::Code => &mut self.code_map,
            Region::Data => &mut self.data_map,
        }
    }

    /// Splits `[addr, addr + len)` into per-page extents.
    pub fn split(&self, addr: u64, len: u64) -> Vec<Extent> {
        let ps = self.page_size;
        let mut out = Vec::new();
        let mut cur = addr;
        let end = addr + len;
        while cur < end {
            let page = cur / ps;
            let off = cur % ps;
            let take = (ps - off).min(end - cur);
            out.push(Extent {
                page: VirtualPage(page),
                offset: off,
                len: take,
            });
            cur += take;
        }
        out
    }

    /// Places an object contiguously at absolute byte address `addr`.
    pub fn place(&mut self, region: Region, name: &str, addr: u64, len: u64) -> Result<()> {
        let extents = self.split(addr, len.max(1));
        self.place_extents(region, name, extents)
    }

    /// Places an object with explicit extents, which need not be contiguous.
    pub fn place_extents(
        &mut self,
        region: Region,
        name: &str,
        extents: Vec<Extent>,
    ) -> Result<()> {
        for e in &extents {
            if e.offset + e.len > self.page_size {
                return Err(Error::Layout(format!(
                    "extent of `{name}` at {}+{} overflows page of {} bytes",
                    e.offset, e.len, self.page_size
                )));
            }
            if let Some(other) = self.overlapping(e, Some(name)) {
                return Err(Error::Layout(format!(
                    "`{name}` overlaps `{other}` on page {}",
                    e.page.0
                )));
            }
            if let Some(st) = &self.staging {
                if st.sa_code == e.page || st.sa_data.contains(&e.page) {
                    return Err(Error::Layout(format!(
                        "`{name}` mapped onto staging page {}",
                        e.page.0
                    )));
                }
            }
        }
        self.map_mut(region).insert(name.to_string(), extents);
        Ok(())
    }

    pub fn remove(&mut self, region: Region, name: &str) -> Option<Vec<Extent>> {
        self.map_mut(region).remove(name)
    }

    fn overlapping(&self, e: &Extent, skip: Option<&str>) -> Option<String> {
        for (name, exts) in self.code_map.iter().chain(self.data_map.iter()) {
            if Some(name.as_str()) == skip {
                continue;
            }
            for o in exts {
                if o.page == e.page && o.offset < e.offset + e.len && e.offset < o.offset + o.len {
                    return Some(name.clone());
                }
            }
        }
        None
    }

    pub fn extents(&self, region: Region, name: &str) -> Option<&[Extent]> {
        self.map(region).get(name).map(|v| v.as_slice())
    }

    pub fn is_mapped(&self, region: Region, name: &str) -> bool {
        self.map(region).contains_key(name)
    }

    /// Page holding byte `byte_index` of an object.
    pub fn page_of(&self, region: Region, name: &str, byte_index: u64) -> Result<VirtualPage> {
        let exts = self
            .map(region)
            .get(name)
            .ok_or_else(|| Error::Layout(format!("object `{name}` is not mapped")))?;
        let mut rem = byte_index;
        for e in exts {
            if rem < e.len {
                return Ok(e.page);
            }
            rem -= e.len;
        }
        Err(Error::Layout(format!(
            "byte index {byte_index} out of bounds for `{name}`"
        )))
    }

    pub fn object_len(&self, region: Region, name: &str) -> Option<u64> {
        self.map(region)
            .get(name)
            .map(|v| v.iter().map(|e| e.len).sum())
    }

    /// Distinct pages an object touches, in address order.
    pub fn pages_of(&self, region: Region, name: &str) -> Vec<VirtualPage> {
        let mut out: Vec<VirtualPage> = Vec::new();
        if let Some(exts) = self.map(region).get(name) {
            for e in exts {
                if out.last() != Some(&e.page) {
                    out.push(e.page);
                }
            }
        }
        out
    }

    /// Largest page id in use, including staging pages.
    pub fn max_page(&self) -> Option<u64> {
        let mapped = self
            .code_map
            .values()
            .chain(self.data_map.values())
            .flatten()
            .map(|e| e.page.0);
        let staged = self
            .staging
            .iter()
            .flat_map(|s| std::iter::once(s.sa_code.0).chain(s.sa_data.iter().map(|p| p.0)));
        mapped.chain(staged).max()
    }

    /// First page id strictly above everything mapped.
    pub fn fresh_page(&self) -> u64 {
        self.max_page().map_or(0, |p| p + 1)
    }

    /// Highest used byte address (exclusive) of a region, or `None` if empty.
    pub fn region_end(&self, region: Region) -> Option<u64> {
        self.map(region)
            .values()
            .flatten()
            .map(|e| e.page.0 * self.page_size + e.offset + e.len)
            .max()
    }

    /// Bytes already used on a page, across both regions.
    pub fn used_ranges(&self, page: VirtualPage) -> Vec<(u64, u64)> {
        let mut v: Vec<(u64, u64)> = self
            .code_map
            .values()
            .chain(self.data_map.values())
            .flatten()
            .filter(|e| e.page == page)
            .map(|e| (e.offset, e.offset + e.len))
            .collect();
        v.sort_unstable();
        v
    }

    /// First free gap of `len` bytes on `page`, honouring `align`.
    pub fn find_gap(&self, page: VirtualPage, len: u64, align: u64) -> Option<u64> {
        if let Some(st) = &self.staging {
            if st.sa_code == page || st.sa_data.contains(&page) {
                return None;
            }
        }
        let mut cur = 0u64;
        for (s, e) in self.used_ranges(page) {
            let a = cur.div_ceil(align) * align;
            if a + len <= s {
                return Some(a);
            }
            cur = cur.max(e);
        }
        let a = cur.div_ceil(align) * align;
        (a + len <= self.page_size).then_some(a)
    }

    /// Every page referenced by the layout, deduplicated and sorted.
    pub fn all_pages(&self, region: Region) -> Vec<VirtualPage> {
        let mut v: Vec<VirtualPage> = self
            .map(region)
            .values()
            .flatten()
            .map(|e| e.page)
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

pub fn check_page_size(page_size: u64) -> Result<()> {
    if page_size < 16 || !page_size.is_power_of_two() {
        return Err(Error::Layout(format!(
            "page size {page_size} must be a power of two >= 16"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccessKind {
    CodeFetch,
    DataRead,
    DataWrite,
}

/// One page touched by one instruction. Events of the same instruction share
/// a `step`; the code fetch comes first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessEvent {
    pub kind: AccessKind,
    pub page: VirtualPage,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PageAccessProfile {
    pub faults: Vec<VirtualPage>,
}

impl PageAccessProfile {
    pub fn len(&self) -> usize {
        self.faults.len()
    }

    pub fn is_empty(&self) -> bool {
        self.faults.is_empty()
    }

    pub fn first_divergence(&self, other: &PageAccessProfile) -> Option<usize> {
        let n = self.faults.len().min(other.faults.len());
        (0..n)
            .find(|&i| self.faults[i] != other.faults[i])
            .or_else(|| (self.faults.len() != other.faults.len()).then_some(n))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("profile serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AdversaryModel {
    /// Unbounded private memory: nothing ever faults.
    InfiniteMemory,
    /// The OS keeps exactly the pages the current instruction needs.
    #[default]
    Pigeonhole,
}

impl std::str::FromStr for AdversaryModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "infinite" | "infinite-memory" | "inf" => Ok(AdversaryModel::InfiniteMemory),
            "pigeonhole" | "bounded" => Ok(AdversaryModel::Pigeonhole),
            _ => Err(Error::Input(format!("unknown adversary model `{s}`"))),
        }
    }
}

/// Online pigeonhole observer: feed it one instruction's needed pages at a
/// time and it appends faults to the profile.
#[derive(Debug, Clone, Default)]
pub struct PigeonholeState {
    resident: [u64; MAX_PAGES_PER_INSTR],
    len: usize,
}

impl PigeonholeState {
    /// `needed` is in canonical order (code page first, then operands) and may
    /// contain duplicates.
    pub fn retire(&mut self, needed: &[VirtualPage], faults: &mut Vec<VirtualPage>) -> Result<()> {
        let mut set = [0u64; MAX_PAGES_PER_INSTR];
        let mut n = 0;
        for p in needed {
            if set[..n].contains(&p.0) {
                continue;
            }
            if n == MAX_PAGES_PER_INSTR {
                return Err(Error::ModelViolation(format!(
                    "instruction needs more than {MAX_PAGES_PER_INSTR} distinct pages"
                )));
            }
            set[n] = p.0;
            n += 1;
        }
        for &p in &set[..n] {
            if !self.resident[..self.len].contains(&p) {
                faults.push(VirtualPage(p));
            }
        }
        self.resident = set;
        self.len = n;
        Ok(())
    }

    pub fn resident(&self) -> &[u64] {
        &self.resident[..self.len]
    }
}

/// Derives the fault sequence the OS observes for a trace.
pub fn observe_profile(trace: &[AccessEvent], model: AdversaryModel) -> Result<PageAccessProfile> {
    for w in trace.windows(2) {
        if w[1].step < w[0].step {
            return Err(Error::ModelViolation(format!(
                "trace steps not monotone: {} after {}",
                w[1].step, w[0].step
            )));
        }
    }
    if model == AdversaryModel::InfiniteMemory {
        return Ok(PageAccessProfile::default());
    }
    let mut state = PigeonholeState::default();
    let mut faults = Vec::new();
    let mut i = 0;
    let mut needed: Vec<VirtualPage> = Vec::with_capacity(4);
    while i < trace.len() {
        let step = trace[i].step;
        needed.clear();
        while i < trace.len() && trace[i].step == step {
            needed.push(trace[i].page);
            i += 1;
        }
        state.retire(&needed, &mut faults)?;
    }
    Ok(PageAccessProfile { faults })
}

/// Serializes a trace as JSON lines of `{kind, page, step}`.
pub fn trace_to_jsonl(trace: &[AccessEvent]) -> String {
    let mut s = String::new();
    for e in trace {
        s.push_str(&serde_json::to_string(e).expect("event serializes"));
        s.push('\n');
    }
    s
}

pub fn trace_from_jsonl(text: &str) -> Result<Vec<AccessEvent>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(kind: AccessKind, page: u64, step: u64) -> AccessEvent {
        AccessEvent {
            kind,
            page: VirtualPage(page),
            step,
        }
    }

    fn pages(p: &PageAccessProfile) -> Vec<u64> {
        p.faults.iter().map(|v| v.0).collect()
    }

    #[test]
    fn infinite_memory_profile_is_empty() {
        let t = vec![
            ev(AccessKind::CodeFetch, 7, 0),
            ev(AccessKind::DataRead, 9, 0),
        ];
        assert!(observe_profile(&t, AdversaryModel::InfiniteMemory)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn single_instruction_faults_code_then_data() {
        let t = vec![
            ev(AccessKind::CodeFetch, 7, 0),
            ev(AccessKind::DataRead, 9, 0),
        ];
        let p = observe_profile(&t, AdversaryModel::Pigeonhole).unwrap();
        assert_eq!(pages(&p), vec![7, 9]);
    }

    #[test]
    fn resident_code_page_does_not_refault() {
        let t = vec![
            ev(AccessKind::CodeFetch, 7, 0),
            ev(AccessKind::DataRead, 9, 0),
            ev(AccessKind::CodeFetch, 7, 1),
            ev(AccessKind::DataRead, 12, 1),
        ];
        let p = observe_profile(&t, AdversaryModel::Pigeonhole).unwrap();
        assert_eq!(pages(&p), vec![7, 9, 12]);
    }

    #[test]
    fn four_pages_in_one_instruction_is_a_violation() {
        let t = vec![
            ev(AccessKind::CodeFetch, 1, 0),
            ev(AccessKind::DataRead, 2, 0),
            ev(AccessKind::DataRead, 3, 0),
            ev(AccessKind::DataWrite, 4, 0),
        ];
        assert!(matches!(
            observe_profile(&t, AdversaryModel::Pigeonhole),
            Err(Error::ModelViolation(_))
        ));
    }

    #[test]
    fn decreasing_steps_rejected() {
        let t = vec![
            ev(AccessKind::CodeFetch, 1, 3),
            ev(AccessKind::CodeFetch, 1, 2),
        ];
        assert!(observe_profile(&t, AdversaryModel::Pigeonhole).is_err());
    }

    #[test]
    fn page_of_table_at_page_start() {
        let mut l = MemoryLayout::new(4096).unwrap();
        l.place(Region::Data, "t", 3 * 4096, 1024 * 4).unwrap();
        assert_eq!(l.page_of(Region::Data, "t", 0).unwrap(), VirtualPage(3));
    }

    #[test]
    fn page_of_split_table_at_0x1c() {
        let mut l = MemoryLayout::new(4096).unwrap();
        // 0x1C entries of 4 bytes remain on page 1.
        l.place(Region::Data, "t1", 4096 + 4096 - 4 * 0x1C, 1024)
            .unwrap();
        assert_eq!(
            l.page_of(Region::Data, "t1", 4 * 0x1B).unwrap(),
            VirtualPage(1)
        );
        assert_eq!(
            l.page_of(Region::Data, "t1", 4 * 0x1C).unwrap(),
            VirtualPage(2)
        );
    }

    #[test]
    fn page_of_three_page_object() {
        let mut l = MemoryLayout::new(64).unwrap();
        l.place(Region::Data, "o", 64 * 5, 150).unwrap();
        assert_eq!(l.extents(Region::Data, "o").unwrap().len(), 3);
        // oracle: (base + 70) / page_size
        assert_eq!(
            l.page_of(Region::Data, "o", 70).unwrap(),
            VirtualPage((64 * 5 + 70) / 64)
        );
        assert_eq!(l.page_of(Region::Data, "o", 70).unwrap(), VirtualPage(6));
    }

    #[test]
    fn page_of_errors() {
        let mut l = MemoryLayout::new(64).unwrap();
        l.place(Region::Data, "o", 0, 8).unwrap();
        assert!(l.page_of(Region::Data, "o", 8).is_err());
        assert!(l.page_of(Region::Data, "nope", 0).is_err());
    }

    #[test]
    fn overlap_and_page_size_checks() {
        assert!(MemoryLayout::new(48).is_err());
        assert!(MemoryLayout::new(8).is_err());
        let mut l = MemoryLayout::new(64).unwrap();
        l.place(Region::Data, "a", 0, 16).unwrap();
        assert!(l.place(Region::Code, "b", 8, 16).is_err());
        l.place(Region::Code, "b", 16, 16).unwrap();
        assert_eq!(l.find_gap(VirtualPage(0), 16, 4), Some(32));
    }

    #[test]
    fn trace_jsonl_roundtrip() {
        let t = vec![
            ev(AccessKind::CodeFetch, 7, 0),
            ev(AccessKind::DataWrite, 9, 0),
        ];
        let s = trace_to_jsonl(&t);
        assert!(s.contains("\"kind\":\"code-fetch\""));
        assert_eq!(trace_from_jsonl(&s).unwrap(), t);
        let p = observe_profile(&t, AdversaryModel::Pigeonhole).unwrap();
        assert_eq!(p.to_json(), "[7,9]");
    }
}
