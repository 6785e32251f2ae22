// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include <nlohmann/json.hpp>

#include "xpert/container.hpp"
#include "xpert/model.hpp"
#include "xpert/pbs.hpp"
#include "xpert/trainer.hpp"

namespace xpert {

// Tensor names used for model containers.
std::string layer_tensor(std::size_t layer, const char* field);

// Stores every layer as layers.<i>.{base,lora_b,lora_a[,mask]} plus metadata
// for scales, activations and pairing rules.
TensorContainer model_to_container(const ToyModel& model);
ToyModel model_from_container(const TensorContainer& c);

nlohmann::json to_json(const RunRecord& r);
nlohmann::json to_json(const PbsReport& r);
std::string format_run_record(const RunRecord& r);

}  // namespace xpert
