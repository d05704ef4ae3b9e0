// Copyright 2026 The kcircuits Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

namespace kc {

/// Process setup for the command-line binaries; call first thing in main.
///
/// OpenBLAS picks its kernels by CPU model and falls back to a generic SSE3
/// kernel on models it does not know (common under virtualization), which is
/// several times slower. When that happens and OPENBLAS_CORETYPE is unset,
/// this sets it from the CPU's instruction-set flags and re-executes the
/// binary, since OpenBLAS reads it only at load time. It also raises the
/// glibc mmap threshold so large tensors are recycled instead of refaulted.
void prepare_process(char** argv);

/// Kernel name OpenBLAS chose, or "unknown" for other BLAS libraries.
const char* blas_core_name();

}  // namespace kc
