// Copyright (c) fetchlab contributors.
// SPDX-License-Identifier: Apache-2.0
#include "fetchlab/io.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace fetchlab::io {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    if (!in.good() && !in.eof()) throw std::runtime_error("error reading " + path);
    return buf.str();
}

void atomic_write_file(const std::string& path, const std::string& content) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open " + tmp + " for writing");
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        out.flush();
        if (!out.good()) throw std::runtime_error("error writing " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        std::remove(tmp.c_str());
        throw std::runtime_error("cannot rename " + tmp + " to " + path);
    }
}

json program_to_json(const listing::Program& program) {
    json doc;
    doc["instructions"] = json::array();
    for (const listing::Instruction& ins : program.instructions) {
        json j;
        j["address"] = ins.address;
        j["length"] = ins.length;
        j["mnemonic"] = ins.mnemonic;
        j["operands"] = ins.operands;
        j["writes_memory"] = ins.writes_memory;
        j["is_cond_branch"] = ins.is_cond_branch;
        j["fuses_with_next"] = ins.fuses_with_next;
        j["is_filler"] = ins.is_filler;
        doc["instructions"].push_back(std::move(j));
    }
    doc["labels"] = json::object();
    for (const auto& [name, addr] : program.labels) doc["labels"][name] = addr;
    doc["branch_pairs"] = json::array();
    for (const listing::BranchPair& pair : program.branch_pairs) {
        json j;
        j["branch_address"] = pair.branch_address;
        j["taken"] = {{"begin", pair.taken.begin}, {"end", pair.taken.end}};
        j["fallthrough"] = {{"begin", pair.fallthrough.begin},
                            {"end", pair.fallthrough.end}};
        j["taken_means_one"] = pair.taken_means_one;
        doc["branch_pairs"].push_back(std::move(j));
    }
    return doc;
}

listing::Program program_from_json(const json& doc) {
    listing::Program prog;
    for (const json& j : doc.at("instructions")) {
        listing::Instruction ins;
        ins.address = j.at("address").get<std::uint64_t>();
        ins.length = j.at("length").get<int>();
        ins.mnemonic = j.at("mnemonic").get<std::string>();
        ins.operands = j.value("operands", std::string());
        ins.writes_memory = j.value("writes_memory", false);
        ins.is_cond_branch = j.value("is_cond_branch", false);
        ins.fuses_with_next = j.value("fuses_with_next", false);
        ins.is_filler = j.value("is_filler", false);
        prog.instructions.push_back(std::move(ins));
    }
    if (doc.contains("labels"))
        for (auto it = doc["labels"].begin(); it != doc["labels"].end(); ++it)
            prog.labels.emplace(it.key(), it.value().get<std::uint64_t>());
    if (doc.contains("branch_pairs"))
        for (const json& j : doc["branch_pairs"]) {
            listing::BranchPair pair;
            pair.branch_address = j.at("branch_address").get<std::uint64_t>();
            pair.taken.begin = j.at("taken").at("begin").get<std::uint64_t>();
            pair.taken.end = j.at("taken").at("end").get<std::uint64_t>();
            pair.fallthrough.begin = j.at("fallthrough").at("begin").get<std::uint64_t>();
            pair.fallthrough.end = j.at("fallthrough").at("end").get<std::uint64_t>();
            pair.taken_means_one = j.value("taken_means_one", true);
            prog.branch_pairs.push_back(pair);
        }
    listing::validate(prog);
    return prog;
}

json timing_params_to_json(const timing::TimingParams& p) {
    json doc;
    doc["base_mu"] = p.base_mu;
    doc["base_sigma"] = p.base_sigma;
    doc["delta"] = p.delta;
    doc["p_slow_table"] = p.p_slow_table;
    doc["contrast_gain"] = p.contrast_gain;
    doc["nonwrite_attenuation"] = p.nonwrite_attenuation;
    doc["run_shift_max"] = p.run_shift_max;
    doc["degraded_mode"] = p.degraded_mode;
    doc["degraded_prob"] = p.degraded_prob;
    doc["page_noise_prob"] = p.page_noise_prob;
    doc["page_noise_cycles"] = p.page_noise_cycles;
    doc["uninterrupted_mu"] = p.uninterrupted_mu;
    doc["uninterrupted_sigma"] = p.uninterrupted_sigma;
    return doc;
}

timing::TimingParams timing_params_from_json(const json& doc) {
    timing::TimingParams p;
    auto get = [&](const char* key, auto& field) {
        if (doc.contains(key)) field = doc[key].get<std::decay_t<decltype(field)>>();
    };
    get("base_mu", p.base_mu);
    get("base_sigma", p.base_sigma);
    get("delta", p.delta);
    if (doc.contains("p_slow_table")) {
        const json& t = doc["p_slow_table"];
        if (!t.is_array() || t.size() != 16)
            throw std::invalid_argument("p_slow_table must hold 16 probabilities");
        for (std::size_t i = 0; i < 16; ++i) p.p_slow_table[i] = t[i].get<double>();
    }
    get("contrast_gain", p.contrast_gain);
    get("nonwrite_attenuation", p.nonwrite_attenuation);
    get("run_shift_max", p.run_shift_max);
    get("degraded_mode", p.degraded_mode);
    get("degraded_prob", p.degraded_prob);
    get("page_noise_prob", p.page_noise_prob);
    get("page_noise_cycles", p.page_noise_cycles);
    get("uninterrupted_mu", p.uninterrupted_mu);
    get("uninterrupted_sigma", p.uninterrupted_sigma);
    timing::validate(p);
    return p;
}

void apply_override(json& config, const std::string& assignment) {
    std::size_t eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw std::invalid_argument("override must look like path.to.key=value");
    std::string path = assignment.substr(0, eq);
    std::string value = assignment.substr(eq + 1);

    json* node = &config;
    std::size_t start = 0;
    while (true) {
        std::size_t dot = path.find('.', start);
        std::string key = path.substr(start, dot - start);
        if (key.empty()) throw std::invalid_argument("empty key in override path " + path);
        if (dot == std::string::npos) {
            json parsed = json::parse(value, nullptr, false);
            (*node)[key] = parsed.is_discarded() ? json(value) : parsed;
            return;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

json feature_table_to_json(const listing::Program& fused_program) {
    json table = json::array();
    for (const frontend::AlignmentFeature& f : frontend::alignment_features(fused_program)) {
        json j;
        char buf[32];
        std::snprintf(buf, sizeof buf, "0x%llx",
                      static_cast<unsigned long long>(f.address));
        j["address"] = buf;
        j["address_mod_16"] = f.address_mod_16;
        j["end_mod_16"] = f.end_mod_16;
        j["crosses_window"] = f.crosses_window;
        j["trailing_writes_in_window"] = f.trailing_writes_in_window;
        table.push_back(std::move(j));
    }
    return table;
}

json patch_to_json(const defense::AlignmentPatch& patch) {
    json doc;
    doc["target_offset"] = patch.target_offset;
    doc["original_size"] = patch.original_size;
    doc["padded_size"] = patch.padded_size;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", patch.overhead_percent());
    doc["overhead_percent"] = json::parse(buf);
    doc["insertion_points"] = json::array();
    for (const defense::InsertionPoint& ip : patch.insertion_points) {
        json j;
        j["address"] = ip.address;
        j["pad_bytes"] = ip.pad_bytes;
        doc["insertion_points"].push_back(std::move(j));
    }
    return doc;
}

std::string runs_to_csv(const std::vector<timing::Run>& runs,
                        const listing::Program& program, bool attack_mode) {
    auto in_branch_path = [&](std::uint64_t addr) {
        for (const listing::BranchPair& pair : program.branch_pairs)
            if (pair.taken.contains(addr) || pair.fallthrough.contains(addr))
                return true;
        return false;
    };
    std::ostringstream out;
    out << "run_id,step_index,instr_address,latency_cycles\n";
    char buf[64];
    for (const timing::Run& run : runs) {
        for (const timing::LatencySample& s : run.samples) {
            out << run.run_id << ',' << s.step_index << ',';
            if (!(attack_mode && in_branch_path(s.instr_address))) {
                std::snprintf(buf, sizeof buf, "0x%llx",
                              static_cast<unsigned long long>(s.instr_address));
                out << buf;
            }
            std::snprintf(buf, sizeof buf, ",%.3f\n", s.latency);
            out << buf;
        }
    }
    return out.str();
}

} // namespace fetchlab::io
