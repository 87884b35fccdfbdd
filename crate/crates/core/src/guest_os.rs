//! Primary-VM side: a page allocator for the OS's donatable memory and the
//! enclave driver applications talk to.
//!
//! The driver owns enclave file descriptors. Creating an enclave allocates
//! pages, copies the image code into them, writes an idle channel header and
//! asks the hypervisor to build the enclave. Invoking writes a request into
//! the channel and enters the enclave; destroying returns the pages to the
//! allocator once the hypervisor has scrubbed and remapped them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::channel::{ChannelError, ChannelStatus, ChannelView};
use crate::harness::image::EnclaveImage;
use crate::hypervisor::{
    EnclaveHandle, HvError, HvEvent, HvcOutcome, Hypercall, Hypervisor, ResumeReason, VcpuId, PRIMARY_VM,
};
use crate::machine::{PcpuId, PAGE_SIZE};
use crate::stage2::{AccessFault, IpaPage};

/// Pages below this IPA page are the OS kernel's own and never donated.
pub const DEFAULT_RESERVED_PAGES: u64 = 16;
pub const FD_TABLE_CAPACITY: usize = 16;
/// 0, 1 and 2 are taken, as usual.
pub const FIRST_FD: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct AllocId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct Fd(pub u32);

impl fmt::Display for Fd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "fd {}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DriverError {
    #[error("bad {0}")]
    BadFd(Fd),
    #[error("need {requested} pages, only {free} free")]
    NoMemory { requested: usize, free: usize },
    #[error("enclave fd table is full")]
    TooManyFds,
    #[error(transparent)]
    Hypervisor(#[from] HvError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Fault(#[from] AccessFault),
    #[error("enclave did not return control: {0}")]
    Runaway(String),
}

/// First-fit allocator over the primary's donatable IPA pages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OsAllocator {
    free: BTreeSet<IpaPage>,
    allocations: BTreeMap<AllocId, Vec<IpaPage>>,
    next_id: u32,
    total: usize,
}

impl OsAllocator {
    pub fn new(pages: impl IntoIterator<Item = IpaPage>) -> Self {
        let free: BTreeSet<IpaPage> = pages.into_iter().collect();
        let total = free.len();
        Self { free, allocations: BTreeMap::new(), next_id: 0, total }
    }

    /// Takes the `n` lowest free pages.
    pub fn alloc(&mut self, n: usize) -> Result<(AllocId, Vec<IpaPage>), DriverError> {
        if n > self.free.len() {
            return Err(DriverError::NoMemory { requested: n, free: self.free.len() });
        }
        let pages: Vec<IpaPage> = self.free.iter().take(n).copied().collect();
        for p in &pages {
            self.free.remove(p);
        }
        let id = AllocId(self.next_id);
        self.next_id += 1;
        self.allocations.insert(id, pages.clone());
        Ok((id, pages))
    }

    pub fn free(&mut self, id: AllocId) -> Option<Vec<IpaPage>> {
        let pages = self.allocations.remove(&id)?;
        self.free.extend(pages.iter().copied());
        Some(pages)
    }

    /// Undoes the most recent `alloc` entirely, id counter included.
    fn cancel(&mut self, id: AllocId) {
        self.free(id);
        if id.0 + 1 == self.next_id {
            self.next_id -= 1;
        }
    }

    pub fn free_pages(&self) -> &BTreeSet<IpaPage> {
        &self.free
    }

    pub fn allocations(&self) -> &BTreeMap<AllocId, Vec<IpaPage>> {
        &self.allocations
    }

    pub fn free_count(&self) -> usize {
        self.free.len()
    }

    pub fn allocated_count(&self) -> usize {
        self.allocations.values().map(Vec::len).sum()
    }

    /// Size of the donatable region.
    pub fn total(&self) -> usize {
        self.total
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnclaveFd {
    pub fd: Fd,
    pub handle: EnclaveHandle,
    pub alloc: AllocId,
    /// Channel as the primary sees it.
    pub channel: ChannelView,
}

/// Something that can run enclave vCPUs until control comes back.
pub trait EnclaveRunner {
    /// Runs whatever is on top of `pcpu` until `caller` is the running vCPU
    /// again.
    fn run_until_resumed(&mut self, hv: &mut Hypervisor, pcpu: PcpuId, caller: VcpuId) -> Result<(), String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GuestOsConfig {
    pub reserved_pages: u64,
}

impl Default for GuestOsConfig {
    fn default() -> Self {
        Self { reserved_pages: DEFAULT_RESERVED_PAGES }
    }
}

#[derive(Debug, Clone)]
pub struct GuestOs {
    allocator: OsAllocator,
    fds: Vec<Option<EnclaveFd>>,
    /// pCPU the driver issues create calls from.
    cpu: PcpuId,
}

impl GuestOs {
    /// Every primary IPA page at or above `reserved_pages` is donatable.
    pub fn new(hv: &Hypervisor, config: GuestOsConfig) -> Self {
        let pages = hv.primary().stage2.entries().map(|(p, _)| p).filter(|p| p.0 >= config.reserved_pages);
        Self { allocator: OsAllocator::new(pages), fds: vec![None; FD_TABLE_CAPACITY], cpu: PcpuId(0) }
    }

    pub fn allocator(&self) -> &OsAllocator {
        &self.allocator
    }

    pub fn set_cpu(&mut self, cpu: PcpuId) {
        self.cpu = cpu;
    }

    pub fn cpu(&self) -> PcpuId {
        self.cpu
    }

    pub fn enclave(&self, fd: Fd) -> Result<&EnclaveFd, DriverError> {
        self.fds
            .get(fd.0 as usize)
            .and_then(Option::as_ref)
            .ok_or(DriverError::BadFd(fd))
    }

    pub fn open_fds(&self) -> impl Iterator<Item = &EnclaveFd> {
        self.fds.iter().flatten()
    }

    fn free_fd(&self) -> Option<Fd> {
        (FIRST_FD as usize..FD_TABLE_CAPACITY).find(|&i| self.fds[i].is_none()).map(|i| Fd(i as u32))
    }

    fn primary_vcpu(&self, hv: &Hypervisor, pcpu: PcpuId) -> VcpuId {
        hv.primary_vcpu(pcpu).expect("primary has a vcpu on every pcpu")
    }

    /// Allocate, copy the image in, ask the hypervisor for an enclave.
    /// On failure nothing observable by the driver's bookkeeping changes.
    pub fn driver_create(&mut self, hv: &mut Hypervisor, image: &EnclaveImage) -> Result<Fd, DriverError> {
        let fd = self.free_fd().ok_or(DriverError::TooManyFds)?;
        let (alloc, pages) = self.allocator.alloc(image.total_pages())?;
        match self.donate(hv, image, &pages) {
            Ok(handle) => {
                let channel = ChannelView::new(PRIMARY_VM, handle.channel_pages.clone());
                hv.record(HvEvent::Note {
                    vm: Some(handle.vm),
                    tag: "driver_create".into(),
                    detail: format!("{fd} -> {} ({} pages)", handle.handle, pages.len()),
                });
                self.fds[fd.0 as usize] = Some(EnclaveFd { fd, handle, alloc, channel });
                Ok(fd)
            }
            Err(e) => {
                self.allocator.cancel(alloc);
                Err(e)
            }
        }
    }

    fn donate(&self, hv: &mut Hypervisor, image: &EnclaveImage, pages: &[IpaPage]) -> Result<EnclaveHandle, DriverError> {
        let n_private = pages.len() - image.channel_size_pages as usize;
        for (page, chunk) in pages[..n_private].iter().zip(image.code.chunks(PAGE_SIZE)) {
            hv.vm_write(PRIMARY_VM, page.base(), chunk)?;
        }
        ChannelView::new(PRIMARY_VM, pages[n_private..].to_vec()).init(hv)?;
        let caller = self.primary_vcpu(hv, self.cpu);
        match hv.dispatch(caller, Hypercall::CreateEnclave { donated: pages.to_vec(), meta: image.meta() })? {
            HvcOutcome::Created(h) => Ok(h),
            other => unreachable!("create returned {other:?}"),
        }
    }

    /// Post a request and run the enclave until it yields or is preempted.
    pub fn driver_invoke(
        &mut self,
        hv: &mut Hypervisor,
        runner: &mut dyn EnclaveRunner,
        fd: Fd,
        cmd_id: u32,
        args: &[u8],
    ) -> Result<(ChannelStatus, Vec<u8>), DriverError> {
        let channel = self.enclave(fd)?.channel.clone();
        channel.write_request(hv, cmd_id, args)?;
        self.enter(hv, runner, fd)
    }

    /// Re-enter an enclave whose last request was preempted.
    pub fn driver_resume(
        &mut self,
        hv: &mut Hypervisor,
        runner: &mut dyn EnclaveRunner,
        fd: Fd,
    ) -> Result<(ChannelStatus, Vec<u8>), DriverError> {
        let channel = self.enclave(fd)?.channel.clone();
        channel.resume_request(hv)?;
        self.enter(hv, runner, fd)
    }

    fn enter(&mut self, hv: &mut Hypervisor, runner: &mut dyn EnclaveRunner, fd: Fd) -> Result<(ChannelStatus, Vec<u8>), DriverError> {
        let e = self.enclave(fd)?;
        let (handle, pcpu, channel) = (e.handle.handle, e.handle.pcpu, e.channel.clone());
        let caller = self.primary_vcpu(hv, pcpu);
        hv.dispatch(caller, Hypercall::InvokeEnclave { handle })?;
        runner.run_until_resumed(hv, pcpu, caller).map_err(DriverError::Runaway)?;
        hv.take_pending_irqs(caller);
        let interrupted = matches!(hv.take_resume(caller), Some(ResumeReason::Interrupted(_)));
        if interrupted && channel.header(hv)?.status == ChannelStatus::Request {
            channel.mark_preempted(hv)?;
            return Ok((ChannelStatus::Preempted, Vec::new()));
        }
        Ok(channel.read_response(hv)?)
    }

    /// Tear down the enclave and give its pages back to the allocator.
    pub fn driver_destroy(&mut self, hv: &mut Hypervisor, fd: Fd) -> Result<(), DriverError> {
        let e = self.enclave(fd)?;
        let (handle, alloc, pcpu, vm) = (e.handle.handle, e.alloc, e.handle.pcpu, e.handle.vm);
        let caller = self.primary_vcpu(hv, pcpu);
        hv.dispatch(caller, Hypercall::DestroyEnclave { handle })?;
        self.allocator.free(alloc);
        self.fds[fd.0 as usize] = None;
        hv.record(HvEvent::Note { vm: Some(vm), tag: "driver_destroy".into(), detail: format!("{fd} closed") });
        Ok(())
    }
}
