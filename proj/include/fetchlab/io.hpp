// Copyright (c) fetchlab contributors.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <json.hpp>

#include <string>
#include <vector>

#include "fetchlab/defense.hpp"

namespace fetchlab::io {

// Key order is kept stable so equal inputs serialize byte-identically.
using json = nlohmann::ordered_json;

std::string read_file(const std::string& path);

// Write-to-temp plus rename: readers never observe a partial file.
void atomic_write_file(const std::string& path, const std::string& content);

json program_to_json(const listing::Program& program);
listing::Program program_from_json(const json& doc);

json timing_params_to_json(const timing::TimingParams& params);

// Missing keys keep their defaults; the result is validated before return.
timing::TimingParams timing_params_from_json(const json& doc);

// Apply one "dotted.path=value" override; the value is parsed as JSON when
// possible and kept as a string otherwise.
void apply_override(json& config, const std::string& assignment);

// Per-unit alignment features of the fused program, for the decode report.
json feature_table_to_json(const listing::Program& fused_program);

json patch_to_json(const defense::AlignmentPatch& patch);

// run_id,step_index,instr_address,latency_cycles. Attack mode blanks the
// address of steps inside either path of a branch pair: the attacker does not
// know where the secret-dependent region executed.
std::string runs_to_csv(const std::vector<timing::Run>& runs,
                        const listing::Program& program, bool attack_mode);

} // namespace fetchlab::io
