//! VM stacking: per-pCPU LIFO of vCPUs linked through HEAD/TAIL.
//!
//! The root of every pCPU stack is the primary vCPU pinned there. A running
//! vCPU may schedule a child (push), a child may yield to its parent (pop),
//! and an interrupt for an ancestor pops everything above it in one switch.

use super::{HvError, HvEvent, Hypervisor, IrqOutcome, ResumeReason, SwitchReason, VcpuId, VmKind, VmState};
use crate::machine::PcpuId;

impl Hypervisor {
    /// vCPUs stacked on `pcpu`, root first, following HEAD links.
    pub fn stack(&self, pcpu: PcpuId) -> Vec<VcpuId> {
        let Some(root) = self.primary_vcpu(pcpu) else {
            return Vec::new();
        };
        let mut out = vec![root];
        let mut at = root;
        while let Some(next) = self.vcpus[at.0 as usize].head {
            if out.contains(&next) {
                break;
            }
            out.push(next);
            at = next;
        }
        out
    }

    /// True if the vCPU sits on some stack, either as top or below it.
    pub fn is_stacked(&self, id: VcpuId) -> bool {
        self.vcpu(id).is_some_and(|v| v.tail.is_some() || self.current(v.pcpu) == Some(id))
    }

    fn set_state(&mut self, vcpu: VcpuId, state: VmState) {
        let vm = self.vcpus[vcpu.0 as usize].vm;
        let vm = &mut self.vms[vm.0 as usize];
        if vm.kind == VmKind::Enclave && vm.state != VmState::Destroyed {
            vm.state = state;
        }
    }

    /// Pushes `child` on top of the running `parent`. Both must be pinned to
    /// the same pCPU and `child` must be off-stack and not a root.
    pub fn schedule_child(&mut self, parent: VcpuId, child: VcpuId) -> Result<(), HvError> {
        let p = self.vcpu(parent).ok_or(HvError::BadVcpu(parent))?;
        let c = self.vcpu(child).ok_or(HvError::BadVcpu(child))?;
        if self.current(p.pcpu) != Some(parent) {
            return Err(HvError::NotRunning(parent));
        }
        if c.pcpu != p.pcpu {
            return Err(HvError::WrongPcpu { vcpu: child, pinned: c.pcpu, pcpu: p.pcpu });
        }
        let is_root = self.primary_vcpu(c.pcpu) == Some(child);
        if !c.attached || is_root || child == parent || self.is_stacked(child) {
            return Err(HvError::NotSchedulable(child));
        }
        let pcpu = p.pcpu;
        self.vcpus[parent.0 as usize].head = Some(child);
        self.vcpus[child.0 as usize].tail = Some(parent);
        self.switch(pcpu, parent, child, SwitchReason::Schedule, Vec::new());
        self.set_state(child, VmState::Running);
        Ok(())
    }

    /// Pops the running `child`, returning control to its TAIL.
    pub fn yield_to_parent(&mut self, child: VcpuId) -> Result<VcpuId, HvError> {
        let c = self.vcpu(child).ok_or(HvError::BadVcpu(child))?;
        if self.current(c.pcpu) != Some(child) {
            return Err(HvError::NotRunning(child));
        }
        let parent = c.tail.ok_or(HvError::NoParent(child))?;
        let pcpu = c.pcpu;
        self.vcpus[parent.0 as usize].head = None;
        self.vcpus[child.0 as usize].tail = None;
        self.vcpus[parent.0 as usize].resume = Some(ResumeReason::ChildYielded(child));
        self.switch(pcpu, child, parent, SwitchReason::Yield, Vec::new());
        self.set_state(child, VmState::Ready);
        Ok(parent)
    }

    /// Interrupt for `target` arriving on `pcpu`. If `target` is below the
    /// running vCPU, everything above it is popped and it runs next;
    /// otherwise the interrupt is left pending on `target`.
    pub fn deliver_interrupt(&mut self, pcpu: PcpuId, target: VcpuId) -> Result<IrqOutcome, HvError> {
        let t = self.vcpu(target).ok_or(HvError::BadVcpu(target))?;
        if !t.attached {
            return Err(HvError::BadVcpu(target));
        }
        if t.pcpu != pcpu {
            return Err(HvError::WrongPcpu { vcpu: target, pinned: t.pcpu, pcpu });
        }
        let current = self.current(pcpu).ok_or(HvError::BadVcpu(target))?;

        let mut ancestors = Vec::new();
        let mut at = self.vcpus[current.0 as usize].tail;
        while let Some(v) = at {
            if ancestors.contains(&v) {
                break;
            }
            ancestors.push(v);
            if v == target {
                break;
            }
            at = self.vcpus[v.0 as usize].tail;
        }

        let outcome = if ancestors.last() == Some(&target) {
            let mut popped = Vec::new();
            let mut top = current;
            while top != target {
                let parent = self.vcpus[top.0 as usize].tail.expect("ancestor chain checked above");
                self.vcpus[top.0 as usize].tail = None;
                self.vcpus[parent.0 as usize].head = None;
                self.set_state(top, VmState::Ready);
                popped.push(top);
                top = parent;
            }
            self.vcpus[target.0 as usize].resume = Some(ResumeReason::Interrupted(popped.clone()));
            let outcome = IrqOutcome::Unwound { popped: popped.clone() };
            self.log(HvEvent::Interrupt { pcpu, target, outcome: outcome.clone() });
            self.switch(pcpu, current, target, SwitchReason::Interrupt, popped);
            outcome
        } else {
            self.vcpus[target.0 as usize].pending_irqs += 1;
            self.log(HvEvent::Interrupt { pcpu, target, outcome: IrqOutcome::Pending });
            IrqOutcome::Pending
        };
        Ok(outcome)
    }

    fn switch(&mut self, pcpu: PcpuId, from: VcpuId, to: VcpuId, reason: SwitchReason, popped: Vec<VcpuId>) {
        self.machine.pcpu_mut(pcpu).expect("pinned pcpu exists").current_vcpu = Some(to);
        self.machine.charge_ctx_switch();
        self.log(HvEvent::ContextSwitch { pcpu, from, to, reason, popped });
    }
}
