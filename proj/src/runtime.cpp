// Copyright 2026 The kcircuits Authors
// SPDX-License-Identifier: Apache-2.0

#include "kcircuits/runtime.hpp"

#include <cstdlib>
#include <cstring>
#include <initializer_list>

#if defined(__linux__)
#include <unistd.h>
#endif
#if defined(__GLIBC__)
#include <malloc.h>
#endif

extern "C" char* openblas_get_corename() __attribute__((weak));

namespace kc {
namespace {

bool generic_kernel(const char* core) {
  for (const char* name : {"Prescott", "Core2", "Nehalem", "Penryn", "Dunnington", "Atom"}) {
    if (std::strcmp(core, name) == 0) return true;
  }
  return false;
}

const char* native_core() {
#if defined(__x86_64__)
  __builtin_cpu_init();
  if (__builtin_cpu_supports("avx512f")) return "SkylakeX";
  if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma")) return "Haswell";
  if (__builtin_cpu_supports("avx")) return "SandyBridge";
#endif
  return nullptr;
}

}  // namespace

const char* blas_core_name() {
  if (openblas_get_corename == nullptr) return "unknown";
  return openblas_get_corename();
}

void prepare_process(char** argv) {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
#if defined(__linux__)
  if (openblas_get_corename == nullptr || std::getenv("OPENBLAS_CORETYPE") != nullptr) return;
  if (!generic_kernel(openblas_get_corename())) return;
  const char* core = native_core();
  if (core == nullptr) return;
  setenv("OPENBLAS_CORETYPE", core, 1);
  execv("/proc/self/exe", argv);  // returns only on failure; keep running as is
#else
  (void)argv;
#endif
}

}  // namespace kc
