// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! Memory-region access policies.
//!
//! A script never sees host pointers. It addresses memory through 64-bit VM
//! addresses, and every load or store is checked against the [`PolicyTable`]
//! before the backing host buffer is touched. An access is allowed only when the
//! whole byte range lies inside a single region whose flags permit it.

use std::fmt;

use serde::Serialize;
use thiserror::Error;

/// Size of the script stack in bytes.
pub const STACK_SIZE: usize = 512;
/// VM address of the lowest stack byte. `r10` starts at `STACK_BASE + STACK_SIZE`.
pub const STACK_BASE: u64 = 0x1000_0000;
/// First VM address handed out by [`GuestMemory::map_next`].
pub const USER_REGION_BASE: u64 = 0x2000_0000;
/// Spacing between consecutive auto-placed regions.
pub const USER_REGION_STRIDE: u64 = 0x1000_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct AccessFlags {
    pub readable: bool,
    pub writable: bool,
}

impl AccessFlags {
    pub const READ: AccessFlags = AccessFlags {
        readable: true,
        writable: false,
    };
    pub const WRITE: AccessFlags = AccessFlags {
        readable: false,
        writable: true,
    };
    pub const READ_WRITE: AccessFlags = AccessFlags {
        readable: true,
        writable: true,
    };

    pub fn permits(&self, kind: AccessKind) -> bool {
        match kind {
            AccessKind::Read => self.readable,
            AccessKind::Write => self.writable,
        }
    }
}

impl fmt::Display for AccessFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.readable, self.writable) {
            (true, true) => f.write_str("rw"),
            (true, false) => f.write_str("r"),
            (false, true) => f.write_str("w"),
            (false, false) => f.write_str("-"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum AccessKind {
    Read,
    Write,
}

impl fmt::Display for AccessKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccessKind::Read => "read",
            AccessKind::Write => "write",
        })
    }
}

/// A VM address range with its permissions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MemoryRegion {
    pub base: u64,
    pub length: u64,
    pub flags: AccessFlags,
    pub label: String,
}

impl MemoryRegion {
    pub fn new(label: impl Into<String>, base: u64, length: u64, flags: AccessFlags) -> Self {
        MemoryRegion {
            base,
            length,
            flags,
            label: label.into(),
        }
    }

    /// One past the last address. Only meaningful for validated regions.
    pub fn end(&self) -> u64 {
        self.base + self.length
    }

    fn contains_range(&self, addr: u64, end: u64) -> bool {
        self.base <= addr && end <= self.end()
    }

    fn contains(&self, addr: u64) -> bool {
        self.base <= addr && addr < self.end()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("region `{0}` has zero length")]
    ZeroLength(String),
    #[error("region `{0}` overflows the 64-bit address space")]
    AddressOverflow(String),
    #[error("region `{0}` grants neither read nor write")]
    NoPermissions(String),
    #[error("region `{new}` overlaps region `{existing}`")]
    Overlap { new: String, existing: String },
    #[error("region `{label}` is {length} bytes but its backing buffer holds {backing}")]
    BackingSize {
        label: String,
        length: u64,
        backing: usize,
    },
}

/// Why an access was refused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Denial {
    /// No byte of the range is mapped.
    Unmapped,
    /// The range starts or ends outside every region.
    OutOfBounds,
    /// Every byte is mapped, but not by a single region.
    StraddlesRegions,
    WriteToReadOnly,
    ReadFromWriteOnly,
    /// The range wraps around the end of the address space.
    AddressOverflow,
}

impl fmt::Display for Denial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Denial::Unmapped => "unmapped address",
            Denial::OutOfBounds => "out of region bounds",
            Denial::StraddlesRegions => "access straddles regions",
            Denial::WriteToReadOnly => "write to read-only region",
            Denial::ReadFromWriteOnly => "read from write-only region",
            Denial::AddressOverflow => "address overflow",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    /// Permitted; carries the index of the matching region.
    Allowed(usize),
    Denied(Denial),
}

impl Access {
    pub fn is_allowed(&self) -> bool {
        matches!(self, Access::Allowed(_))
    }
}

/// Ordered list of regions consulted on every memory access.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PolicyTable {
    regions: Vec<MemoryRegion>,
}

impl PolicyTable {
    pub fn new() -> Self {
        PolicyTable::default()
    }

    /// A table holding only the 512-byte read-write stack region.
    pub fn with_stack() -> Self {
        let mut table = PolicyTable::new();
        table
            .add_region(stack_region())
            .expect("stack region is valid");
        table
    }

    pub fn regions(&self) -> &[MemoryRegion] {
        &self.regions
    }

    /// Appends `region`, returning its index.
    pub fn add_region(&mut self, region: MemoryRegion) -> Result<usize, PolicyError> {
        if region.length == 0 {
            return Err(PolicyError::ZeroLength(region.label));
        }
        if region.base.checked_add(region.length).is_none() {
            return Err(PolicyError::AddressOverflow(region.label));
        }
        if !region.flags.readable && !region.flags.writable {
            return Err(PolicyError::NoPermissions(region.label));
        }
        if let Some(existing) = self
            .regions
            .iter()
            .find(|r| region.base < r.end() && r.base < region.end())
        {
            return Err(PolicyError::Overlap {
                new: region.label,
                existing: existing.label.clone(),
            });
        }
        self.regions.push(region);
        Ok(self.regions.len() - 1)
    }

    /// Decides whether `size` bytes at `addr` may be accessed as `kind`.
    pub fn check_access(&self, addr: u64, size: u64, kind: AccessKind) -> Access {
        let Some(end) = addr.checked_add(size) else {
            return Access::Denied(Denial::AddressOverflow);
        };
        // Regions never overlap, so at most one can contain the whole range.
        for (index, region) in self.regions.iter().enumerate() {
            if region.contains_range(addr, end) {
                if region.flags.permits(kind) {
                    return Access::Allowed(index);
                }
                return Access::Denied(match kind {
                    AccessKind::Read => Denial::ReadFromWriteOnly,
                    AccessKind::Write => Denial::WriteToReadOnly,
                });
            }
        }
        let first = self.regions.iter().find(|r| r.contains(addr));
        let last = self.regions.iter().find(|r| r.contains(end - 1));
        let overlaps_any = self.regions.iter().any(|r| addr < r.end() && r.base < end);
        match (first, last) {
            (Some(_), Some(_)) if self.covered(addr, end) => {
                Access::Denied(Denial::StraddlesRegions)
            }
            _ if overlaps_any => Access::Denied(Denial::OutOfBounds),
            _ => Access::Denied(Denial::Unmapped),
        }
    }

    fn covered(&self, mut addr: u64, end: u64) -> bool {
        while addr < end {
            match self.regions.iter().find(|r| r.contains(addr)) {
                Some(r) => addr = r.end(),
                None => return false,
            }
        }
        true
    }
}

/// Free-function form of [`PolicyTable::check_access`].
pub fn check_access(table: &PolicyTable, addr: u64, size: u64, kind: AccessKind) -> Access {
    table.check_access(addr, size, kind)
}

/// Free-function form of [`PolicyTable::add_region`].
pub fn add_region(table: &mut PolicyTable, region: MemoryRegion) -> Result<usize, PolicyError> {
    table.add_region(region)
}

pub fn stack_region() -> MemoryRegion {
    MemoryRegion::new(
        "stack",
        STACK_BASE,
        STACK_SIZE as u64,
        AccessFlags::READ_WRITE,
    )
}

/// A refused memory access.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Error)]
#[error("{kind} of {size} bytes at {addr:#x} denied: {denial}")]
pub struct MemoryFault {
    pub addr: u64,
    pub size: u64,
    pub kind: AccessKind,
    pub denial: Denial,
}

enum Backing<'a> {
    Stack,
    Host(&'a mut [u8]),
}

/// The script-visible address space: the policy table, the stack, and the host
/// buffers backing every other region.
///
/// All reads and writes, whether issued by an instruction or by a host
/// function on the script's behalf, go through [`PolicyTable::check_access`].
pub struct GuestMemory<'a> {
    policy: PolicyTable,
    backing: Vec<Backing<'a>>,
    stack: Box<[u8; STACK_SIZE]>,
    consultations: u64,
}

impl Default for GuestMemory<'_> {
    fn default() -> Self {
        GuestMemory::new()
    }
}

impl<'a> GuestMemory<'a> {
    pub fn new() -> Self {
        GuestMemory {
            policy: PolicyTable::with_stack(),
            backing: vec![Backing::Stack],
            stack: Box::new([0; STACK_SIZE]),
            consultations: 0,
        }
    }

    pub fn policy(&self) -> &PolicyTable {
        &self.policy
    }

    /// VM address one past the top of the stack, the initial value of `r10`.
    pub fn stack_top(&self) -> u64 {
        STACK_BASE + STACK_SIZE as u64
    }

    pub fn stack(&self) -> &[u8; STACK_SIZE] {
        &self.stack
    }

    pub(crate) fn clear_stack(&mut self) {
        self.stack.fill(0);
    }

    /// Maps `buf` as the backing store of `region`.
    pub fn map(&mut self, region: MemoryRegion, buf: &'a mut [u8]) -> Result<usize, PolicyError> {
        if region.length != buf.len() as u64 {
            return Err(PolicyError::BackingSize {
                label: region.label,
                length: region.length,
                backing: buf.len(),
            });
        }
        let index = self.policy.add_region(region)?;
        self.backing.push(Backing::Host(buf));
        Ok(index)
    }

    /// Maps `buf` at the next free auto-placed base address and returns that address.
    pub fn map_next(
        &mut self,
        label: impl Into<String>,
        flags: AccessFlags,
        buf: &'a mut [u8],
    ) -> Result<u64, PolicyError> {
        let base = self
            .policy
            .regions()
            .iter()
            .map(|r| r.end())
            .filter(|&end| end > USER_REGION_BASE)
            .max()
            .map(|end| end.div_ceil(USER_REGION_STRIDE) * USER_REGION_STRIDE)
            .unwrap_or(USER_REGION_BASE);
        let region = MemoryRegion::new(label, base, buf.len() as u64, flags);
        self.map(region, buf)?;
        Ok(base)
    }

    /// Number of policy checks performed so far.
    pub fn consultations(&self) -> u64 {
        self.consultations
    }

    fn resolve(
        &mut self,
        addr: u64,
        len: usize,
        kind: AccessKind,
    ) -> Result<&mut [u8], MemoryFault> {
        self.consultations += 1;
        match self.policy.check_access(addr, len as u64, kind) {
            Access::Allowed(index) => {
                let offset = (addr - self.policy.regions[index].base) as usize;
                let bytes: &mut [u8] = match &mut self.backing[index] {
                    Backing::Stack => &mut self.stack[..],
                    Backing::Host(buf) => buf,
                };
                Ok(&mut bytes[offset..offset + len])
            }
            Access::Denied(denial) => Err(MemoryFault {
                addr,
                size: len as u64,
                kind,
                denial,
            }),
        }
    }

    /// Loads a little-endian value of `size` bytes (1, 2, 4 or 8), zero-extended.
    pub fn load(&mut self, addr: u64, size: usize) -> Result<u64, MemoryFault> {
        let bytes = self.resolve(addr, size, AccessKind::Read)?;
        let mut word = [0u8; 8];
        word[..size].copy_from_slice(bytes);
        Ok(u64::from_le_bytes(word))
    }

    /// Stores the low `size` bytes of `value`, little-endian.
    pub fn store(&mut self, addr: u64, size: usize, value: u64) -> Result<(), MemoryFault> {
        let bytes = self.resolve(addr, size, AccessKind::Write)?;
        bytes.copy_from_slice(&value.to_le_bytes()[..size]);
        Ok(())
    }

    /// Copies `out.len()` bytes starting at `addr` into `out`.
    pub fn read_bytes(&mut self, addr: u64, out: &mut [u8]) -> Result<(), MemoryFault> {
        let bytes = self.resolve(addr, out.len(), AccessKind::Read)?;
        out.copy_from_slice(bytes);
        Ok(())
    }

    pub fn write_bytes(&mut self, addr: u64, data: &[u8]) -> Result<(), MemoryFault> {
        let bytes = self.resolve(addr, data.len(), AccessKind::Write)?;
        bytes.copy_from_slice(data);
        Ok(())
    }
}
