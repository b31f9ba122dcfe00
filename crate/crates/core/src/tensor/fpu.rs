//! Scoped flush-to-zero for subnormal floats.
//!
//! Late in training, gradients shrink into the subnormal range and x86
//! arithmetic on them is many times slower. While a [`FlushSubnormals`] is
//! alive, the current thread treats subnormal inputs and results as zero.

/// Sets flush-to-zero and denormals-are-zero on the current thread until
/// dropped, then restores the previous mode. A no-op off x86-64.
#[must_use]
pub struct FlushSubnormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

#[cfg(target_arch = "x86_64")]
mod mxcsr {
    const FTZ: u32 = 1 << 15;
    const DAZ: u32 = 1 << 6;

    pub fn read() -> u32 {
        let mut v: u32 = 0;
        // SAFETY: stmxcsr stores the 32-bit control register to the given address.
        unsafe { std::arch::asm!("stmxcsr [{}]", in(reg) &mut v, options(nostack, preserves_flags)) };
        v
    }

    pub fn write(v: u32) {
        // SAFETY: ldmxcsr loads a control word built from a value read by stmxcsr
        // with only the FTZ/DAZ mode bits changed.
        unsafe { std::arch::asm!("ldmxcsr [{}]", in(reg) &v, options(nostack, readonly, preserves_flags)) };
    }

    pub fn flushing(v: u32) -> u32 {
        v | FTZ | DAZ
    }
}

impl FlushSubnormals {
    pub fn new() -> Self {
        #[cfg(target_arch = "x86_64")]
        {
            let saved = mxcsr::read();
            mxcsr::write(mxcsr::flushing(saved));
            Self { saved }
        }
        #[cfg(not(target_arch = "x86_64"))]
        Self {}
    }
}

impl Default for FlushSubnormals {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for FlushSubnormals {
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        mxcsr::write(self.saved);
    }
}
