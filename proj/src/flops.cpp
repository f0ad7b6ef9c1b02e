#include "slora/flops.h"

namespace slora::flops {

const char* path_name(Path p) {
  switch (p) {
    case Path::main_fwd: return "main_fwd";
    case Path::main_bwd_input: return "main_bwd_input";
    case Path::lora_fwd: return "lora_fwd";
    case Path::lora_bwd: return "lora_bwd";
    case Path::estimator: return "estimator";
    case Path::head: return "head";
    case Path::base_bwd_weight: return "base_bwd_weight";
    default: return "?";
  }
}

Attribution& current() {
  thread_local Attribution attr;
  return attr;
}

Attribution bwd_input_attr(const Attribution& fwd) {
  Attribution a = fwd;
  switch (fwd.path) {
    case Path::main_fwd: a.path = Path::main_bwd_input; break;
    case Path::lora_fwd: a.path = Path::lora_bwd; break;
    case Path::head: a.path = Path::head; break;
    case Path::estimator:
      fail("flops: estimator matmuls must not record gradients");
    default: break;  // already a backward path
  }
  return a;
}

Attribution bwd_weight_attr(const Attribution& fwd) {
  Attribution a = fwd;
  switch (fwd.path) {
    case Path::main_fwd: a.path = Path::base_bwd_weight; break;
    case Path::lora_fwd: a.path = Path::lora_bwd; break;
    case Path::head: a.path = Path::base_bwd_weight; break;
    case Path::estimator:
      fail("flops: estimator matmuls must not record gradients");
    default: break;
  }
  return a;
}

}  // namespace slora::flops
