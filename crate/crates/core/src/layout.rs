//! Default virtual-address layout of a compiled program.

use crate::error::{Error, Result};
use crate::exectree::ExecTree;
use crate::ir::{PAD_CODE, PAD_DATA};
use crate::model::{MemoryLayout, Region, VirtualPage};

/// Code object occupying the reserved fault-handler page.
pub const HANDLER: &str = "__handler";

pub fn handler_page(tree: &ExecTree) -> u64 {
    tree.handler_page.unwrap_or(0)
}

/// Lays out the program: the handler page, then pragma placements, then
/// every remaining code object packed from the page after the handler, then
/// data objects from the first page after the code.
pub fn build_layout(tree: &ExecTree, page_size: u64) -> Result<MemoryLayout> {
    let mut lay = MemoryLayout::new(page_size)?;
    let h = handler_page(tree);
    lay.place(Region::Code, HANDLER, h * page_size, page_size)?;
    for p in &tree.placements {
        let region = if tree.code_id(&p.name).is_some() {
            Region::Code
        } else if tree.object_id(&p.name).is_some() {
            Region::Data
        } else {
            return Err(Error::Layout(format!(
                "placement names unknown object `{}`",
                p.name
            )));
        };
        let len = object_size(tree, region, &p.name);
        if p.offset >= page_size {
            return Err(Error::Layout(format!(
                "offset {} of `{}` is outside a {page_size}-byte page",
                p.offset, p.name
            )));
        }
        lay.place(region, &p.name, p.page * page_size + p.offset, len)?;
    }
    let mut cursor = (h + 1) * page_size;
    for c in &tree.code_objects {
        if c.name == PAD_CODE || lay.is_mapped(Region::Code, &c.name) {
            continue;
        }
        cursor = alloc(&mut lay, Region::Code, &c.name, c.size, 4, cursor)?;
    }
    if tree.code_id(PAD_CODE).is_some() && !lay.is_mapped(Region::Code, PAD_CODE) {
        place_shared(&mut lay, Region::Code, PAD_CODE, 4, 4)?;
    }
    let code_end = lay.region_end(Region::Code).unwrap_or(0);
    let mut cursor = code_end.div_ceil(page_size) * page_size;
    for o in &tree.objects {
        if o.name == PAD_DATA || lay.is_mapped(Region::Data, &o.name) {
            continue;
        }
        cursor = alloc(
            &mut lay,
            Region::Data,
            &o.name,
            o.byte_len(),
            o.elem_bytes,
            cursor,
        )?;
    }
    if tree.object_id(PAD_DATA).is_some() && !lay.is_mapped(Region::Data, PAD_DATA) {
        place_shared(&mut lay, Region::Data, PAD_DATA, 4, 4)?;
    }
    Ok(lay)
}

pub fn object_size(tree: &ExecTree, region: Region, name: &str) -> u64 {
    match region {
        Region::Code => tree
            .code_id(name)
            .map(|c| tree.code_objects[c as usize].size)
            .unwrap_or(0),
        Region::Data => tree
            .object_id(name)
            .map(|o| tree.objects[o as usize].byte_len())
            .unwrap_or(0),
    }
}

/// Places an object at the first free address at or after `cursor` that
/// keeps it within one page when it fits in one. Returns the new cursor.
pub fn alloc(
    lay: &mut MemoryLayout,
    region: Region,
    name: &str,
    len: u64,
    align: u64,
    cursor: u64,
) -> Result<u64> {
    let ps = lay.page_size;
    let len = len.max(1);
    let align = align.max(1);
    if len > ps {
        // Multi-page objects start on a page that is entirely free from here on.
        let mut page = cursor.div_ceil(ps);
        loop {
            let pages = len.div_ceil(ps);
            let free = (page..page + pages)
                .all(|p| lay.used_ranges(VirtualPage(p)).is_empty() && !is_staging(lay, p));
            if free {
                break;
            }
            page += 1;
        }
        let addr = page * ps;
        lay.place(region, name, addr, len)?;
        return Ok(addr + len);
    }
    let mut page = cursor / ps;
    let mut min_off = cursor % ps;
    loop {
        if !is_staging(lay, page) {
            if let Some(off) = gap_from(lay, VirtualPage(page), len, align, min_off) {
                let addr = page * ps + off;
                lay.place(region, name, addr, len)?;
                return Ok(addr + len);
            }
        }
        page += 1;
        min_off = 0;
    }
}

fn is_staging(lay: &MemoryLayout, page: u64) -> bool {
    lay.staging
        .as_ref()
        .is_some_and(|s| s.sa_code.0 == page || s.sa_data.iter().any(|p| p.0 == page))
}

/// First gap of `len` bytes on `page` at an offset of at least `min_off`.
pub fn gap_from(
    lay: &MemoryLayout,
    page: VirtualPage,
    len: u64,
    align: u64,
    min_off: u64,
) -> Option<u64> {
    let mut cur = min_off;
    for (s, e) in lay.used_ranges(page) {
        if e <= cur {
            continue;
        }
        let a = cur.div_ceil(align) * align;
        if a + len <= s {
            return Some(a);
        }
        cur = cur.max(e);
    }
    let a = cur.div_ceil(align) * align;
    (a + len <= lay.page_size).then_some(a)
}

/// Places a small object in the first existing page of its region with
/// room, else on a fresh page.
pub fn place_shared(
    lay: &mut MemoryLayout,
    region: Region,
    name: &str,
    len: u64,
    align: u64,
) -> Result<()> {
    let pages = lay.all_pages(region);
    let handler = lay.extents(Region::Code, HANDLER).map(|e| e[0].page);
    for p in pages {
        if Some(p) == handler {
            continue;
        }
        if let Some(off) = lay.find_gap(p, len, align) {
            return lay.place(region, name, p.0 * lay.page_size + off, len);
        }
    }
    let p = lay.fresh_page();
    lay.place(region, name, p * lay.page_size, len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exectree::{build_execution_tree, BuildOptions};
    use crate::frontend::{label_sensitivity, parse};

    fn tree(src: &str) -> ExecTree {
        build_execution_tree(
            &label_sensitivity(&parse(src).unwrap()).unwrap(),
            &BuildOptions::default(),
        )
        .unwrap()
    }

    #[test]
    fn code_after_handler_then_data() {
        let t = tree("int a[8]; int b; void main() { b = a[1]; }");
        let lay = build_layout(&t, 64).unwrap();
        assert_eq!(lay.pages_of(Region::Code, HANDLER), vec![VirtualPage(0)]);
        assert_eq!(lay.pages_of(Region::Code, "main"), vec![VirtualPage(1)]);
        assert_eq!(lay.pages_of(Region::Data, "a"), vec![VirtualPage(2)]);
        assert_eq!(lay.pages_of(Region::Data, "b"), vec![VirtualPage(2)]);
    }

    #[test]
    fn pragmas_place_objects() {
        let t = tree("#pragma place t at 3:48\nint t[8]; void main() { t[0] = 1; }");
        let lay = build_layout(&t, 64).unwrap();
        assert_eq!(
            lay.pages_of(Region::Data, "t"),
            vec![VirtualPage(3), VirtualPage(4)]
        );
        assert_eq!(lay.page_of(Region::Data, "t", 15).unwrap(), VirtualPage(3));
        assert_eq!(lay.page_of(Region::Data, "t", 16).unwrap(), VirtualPage(4));
    }

    #[test]
    fn small_objects_do_not_straddle_pages() {
        let t = tree("int a[12]; int b[8]; void main() { a[0] = b[0]; }");
        let lay = build_layout(&t, 64).unwrap();
        assert_eq!(lay.pages_of(Region::Data, "b").len(), 1);
    }
}
