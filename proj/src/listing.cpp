// Copyright (c) fetchlab contributors.
// SPDX-License-Identifier: Apache-2.0
#include "fetchlab/listing.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <sstream>

namespace fetchlab::listing {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_ws(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    std::string tok;
    while (is >> tok) out.push_back(tok);
    return out;
}

bool valid_label_name(const std::string& s) {
    if (s.empty()) return false;
    if (!std::isalpha(static_cast<unsigned char>(s[0])) && s[0] != '_' && s[0] != '.')
        return false;
    for (char c : s)
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '.')
            return false;
    return true;
}

// Range end: one past the first ret at or after begin, else program end.
std::uint64_t range_end_from(const Program& p, std::uint64_t begin) {
    for (const Instruction& ins : p.instructions)
        if (ins.address >= begin && ins.mnemonic == "ret")
            return ins.address + static_cast<std::uint64_t>(ins.length);
    return p.end_address();
}

constexpr std::uint64_t kAddressLimit = 1ULL << 48;

} // namespace

const Instruction* Program::find(std::uint64_t address) const {
    auto it = std::lower_bound(instructions.begin(), instructions.end(), address,
                               [](const Instruction& i, std::uint64_t a) { return i.address < a; });
    if (it == instructions.end() || it->address != address) return nullptr;
    return &*it;
}

std::size_t Program::index_of(std::uint64_t address) const {
    const Instruction* ins = find(address);
    if (!ins) throw std::invalid_argument("no instruction at address " + std::to_string(address));
    return static_cast<std::size_t>(ins - instructions.data());
}

std::uint64_t Program::end_address() const {
    if (instructions.empty()) return 0;
    const Instruction& last = instructions.back();
    return last.address + static_cast<std::uint64_t>(last.length);
}

std::uint64_t Program::code_bytes() const {
    std::uint64_t total = 0;
    for (const Instruction& ins : instructions) total += static_cast<std::uint64_t>(ins.length);
    return total;
}

Program parse_listing(const std::string& text) {
    Program prog;
    std::uint64_t cursor = 0;
    // Labels may appear before any instruction is laid out; their addresses
    // are the cursor at the point of declaration.
    int line_no = 0;
    std::istringstream stream(text);
    std::string raw;
    while (std::getline(stream, raw)) {
        ++line_no;
        std::string line = raw;
        if (std::size_t hash = line.find('#'); hash != std::string::npos)
            line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;

        if (line[0] == '.') {
            std::vector<std::string> tok = split_ws(line);
            if (tok[0] != ".alignmod")
                throw ParseError(line_no, "unknown directive " + tok[0]);
            if (tok.size() != 2 && tok.size() != 3)
                throw ParseError(line_no, ".alignmod takes one or two arguments");
            std::uint64_t modulus = 16, target = 0;
            try {
                if (tok.size() == 3) {
                    modulus = std::stoull(tok[1]);
                    target = std::stoull(tok[2]);
                } else {
                    target = std::stoull(tok[1]);
                }
            } catch (const std::exception&) {
                throw ParseError(line_no, "malformed .alignmod argument");
            }
            if (modulus == 0) throw ParseError(line_no, ".alignmod modulus must be positive");
            if (target >= modulus)
                throw ParseError(line_no, ".alignmod target must be below the modulus");
            cursor += (target + modulus - cursor % modulus) % modulus;
            if (cursor >= kAddressLimit) throw ParseError(line_no, "address overflow");
            continue;
        }

        if (line.back() == ':' && line.find_first_of(" \t") == std::string::npos) {
            std::string name = line.substr(0, line.size() - 1);
            if (!valid_label_name(name)) throw ParseError(line_no, "malformed label " + name);
            if (prog.labels.count(name)) throw ParseError(line_no, "duplicate label " + name);
            prog.labels.emplace(name, cursor);
            continue;
        }

        std::size_t semi = line.find(';');
        if (semi == std::string::npos)
            throw ParseError(line_no, "instruction line needs '; len=<n>'");
        std::string head = trim(line.substr(0, semi));
        std::string attrs = trim(line.substr(semi + 1));
        if (head.empty()) throw ParseError(line_no, "missing mnemonic");

        Instruction ins;
        ins.address = cursor;
        std::size_t sp = head.find_first_of(" \t");
        if (sp == std::string::npos) {
            ins.mnemonic = head;
        } else {
            ins.mnemonic = head.substr(0, sp);
            ins.operands = trim(head.substr(sp + 1));
        }

        bool have_len = false;
        for (const std::string& tok : split_ws(attrs)) {
            if (tok.rfind("len=", 0) == 0) {
                try {
                    ins.length = std::stoi(tok.substr(4));
                } catch (const std::exception&) {
                    throw ParseError(line_no, "malformed length " + tok);
                }
                have_len = true;
            } else if (tok == "write") {
                ins.writes_memory = true;
            } else if (tok == "cbr") {
                ins.is_cond_branch = true;
            } else if (tok == "filler") {
                ins.is_filler = true;
            } else {
                throw ParseError(line_no, "unknown attribute " + tok);
            }
        }
        if (!have_len) throw ParseError(line_no, "instruction line needs len=<n>");
        if (ins.length < 1 || ins.length > 15)
            throw ParseError(line_no, "length must be in 1..15");

        cursor += static_cast<std::uint64_t>(ins.length);
        if (cursor >= kAddressLimit) throw ParseError(line_no, "address overflow");
        prog.instructions.push_back(std::move(ins));
    }

    // Compare-with-branch fusion needs contiguous addresses.
    for (std::size_t i = 0; i + 1 < prog.instructions.size(); ++i) {
        Instruction& a = prog.instructions[i];
        const Instruction& b = prog.instructions[i + 1];
        if (a.mnemonic == "cmp" && b.is_cond_branch &&
            b.address == a.address + static_cast<std::uint64_t>(a.length))
            a.fuses_with_next = true;
    }

    // A cond branch naming a known label yields a branch pair.
    for (const Instruction& ins : prog.instructions) {
        if (!ins.is_cond_branch) continue;
        std::string target_name;
        std::istringstream ops(ins.operands);
        std::string tok;
        while (ops >> tok) {
            while (!tok.empty() && (tok.back() == ',' || tok.back() == ')')) tok.pop_back();
            if (prog.labels.count(tok)) {
                target_name = tok;
                break;
            }
        }
        if (target_name.empty()) continue;
        BranchPair pair;
        pair.branch_address = ins.address;
        pair.taken.begin = prog.labels.at(target_name);
        pair.taken.end = range_end_from(prog, pair.taken.begin);
        pair.fallthrough.begin = ins.address + static_cast<std::uint64_t>(ins.length);
        pair.fallthrough.end = range_end_from(prog, pair.fallthrough.begin);
        prog.branch_pairs.push_back(pair);
    }

    validate(prog);
    return prog;
}

std::string emit_listing(const Program& program) {
    // Labels grouped by address, emitted just before the instruction there.
    std::multimap<std::uint64_t, std::string> labels_at;
    for (const auto& [name, addr] : program.labels) labels_at.emplace(addr, name);

    std::ostringstream out;
    std::uint64_t cursor = 0;
    auto emit_labels = [&](std::uint64_t addr) {
        auto [lo, hi] = labels_at.equal_range(addr);
        for (auto it = lo; it != hi; ++it) out << it->second << ":\n";
    };
    for (const Instruction& ins : program.instructions) {
        if (ins.address > cursor) {
            std::uint64_t span = ins.address - cursor + 1;
            std::uint64_t modulus = std::max<std::uint64_t>(16, std::bit_ceil(span));
            out << ".alignmod " << modulus << ' ' << (ins.address % modulus) << '\n';
        } else if (ins.address < cursor) {
            throw std::invalid_argument("overlapping instructions in emit_listing");
        }
        emit_labels(ins.address);
        out << ins.mnemonic;
        if (!ins.operands.empty()) out << ' ' << ins.operands;
        out << "; len=" << ins.length;
        if (ins.writes_memory) out << " write";
        if (ins.is_cond_branch) out << " cbr";
        if (ins.is_filler) out << " filler";
        out << '\n';
        cursor = ins.address + static_cast<std::uint64_t>(ins.length);
    }
    emit_labels(program.end_address());
    return out.str();
}

void validate(const Program& program) {
    std::uint64_t prev_end = 0;
    for (const Instruction& ins : program.instructions) {
        if (ins.length < 1 || ins.length > 15)
            throw std::invalid_argument("instruction length out of range at address " +
                                        std::to_string(ins.address));
        if (ins.address < prev_end)
            throw std::invalid_argument("overlapping instruction at address " +
                                        std::to_string(ins.address));
        prev_end = ins.address + static_cast<std::uint64_t>(ins.length);
    }
    for (const auto& [name, addr] : program.labels) {
        if (!program.find(addr) && addr != program.end_address())
            throw std::invalid_argument("label " + name + " points between instructions");
    }
    for (const BranchPair& pair : program.branch_pairs) {
        const Instruction* br = program.find(pair.branch_address);
        if (!br || !(br->is_cond_branch || br->fuses_with_next))
            throw std::invalid_argument("branch pair without a conditional branch unit");
        for (const AddrRange& r : {pair.taken, pair.fallthrough}) {
            if (r.begin >= r.end) throw std::invalid_argument("empty branch path range");
            if (!program.find(r.begin))
                throw std::invalid_argument("branch path does not start on an instruction");
        }
    }
}

Program template_branch_program(int x, int y, int reps, int add_len, int mov_len) {
    if (x < 0 || x > 31 || y < 0 || y > 31)
        throw std::invalid_argument("path offsets must be in 0..31");
    if (reps < 1) throw std::invalid_argument("reps must be positive");
    if (add_len < 1 || mov_len < 1 || add_len + mov_len > 16)
        throw std::invalid_argument("pair must fit a 16-byte slot");

    const std::uint64_t if_start = 16 + static_cast<std::uint64_t>(x % 16) + (x >= 16 ? 16 : 0);
    Program prog;
    auto push = [&](std::uint64_t addr, int len, const char* mnem, const char* ops,
                    bool write, bool cbr) {
        Instruction ins;
        ins.address = addr;
        ins.length = len;
        ins.mnemonic = mnem;
        ins.operands = ops;
        ins.writes_memory = write;
        ins.is_cond_branch = cbr;
        prog.instructions.push_back(std::move(ins));
    };
    auto push_path = [&](std::uint64_t start) {
        for (int k = 0; k < reps; ++k) {
            std::uint64_t slot = start + 16ULL * static_cast<std::uint64_t>(k);
            push(slot, add_len, "add", "$0x1, %rax", false, false);
            push(slot + static_cast<std::uint64_t>(add_len), mov_len, "mov", "%rax, (%rdi)",
                 true, false);
        }
        std::uint64_t ret_addr = start + 16ULL * static_cast<std::uint64_t>(reps);
        push(ret_addr, 1, "ret", "", false, false);
        return ret_addr + 1;
    };

    push(if_start - 4, 2, "cmp", "(%rsi), %al", false, false);
    push(if_start - 2, 2, "jnz", "else", false, true);
    std::uint64_t if_end = push_path(if_start);

    std::uint64_t else_start = if_end + (static_cast<std::uint64_t>(y % 16) + 16 - if_end % 16) % 16;
    if (y >= 16) else_start += 16;
    std::uint64_t else_end = push_path(else_start);

    prog.labels.emplace("if", if_start);
    prog.labels.emplace("else", else_start);
    prog.instructions[0].fuses_with_next = true;

    BranchPair pair;
    pair.branch_address = if_start - 2;
    pair.taken = {else_start, else_end};
    pair.fallthrough = {if_start, if_end};
    prog.branch_pairs.push_back(pair);

    validate(prog);
    return prog;
}

std::string example_branch_listing() {
    return
        "# Balanced byte compare: load two counters, test a secret byte, then\n"
        "# update both counters on either path.\n"
        ".alignmod 16 3\n"
        "mov (var1), %eax; len=5\n"
        "mov (var2), %ebx; len=4\n"
        "cmp (secret), $0x61; len=2\n"
        "jnz else; len=2 cbr\n"
        "if:\n"
        "add $0x1, %eax; len=4\n"
        "mov %eax, (var1); len=5 write\n"
        "add $0x1, %ebx; len=4\n"
        "mov %ebx, (var2); len=5 write\n"
        "ret; len=1\n"
        ".alignmod 16 11\n"
        "else:\n"
        "add $0x2, %eax; len=4\n"
        "mov %eax, (var1); len=5 write\n"
        "add $0x2, %ebx; len=4\n"
        "mov %ebx, (var2); len=5 write\n"
        "ret; len=1\n";
}

std::vector<std::uint64_t> executed_path(const Program& program,
                                         const std::vector<int>& secret_bits,
                                         bool include_terminal_ret) {
    if (program.instructions.empty()) return {};
    std::vector<std::uint64_t> path;
    std::size_t bit_pos = 0;
    std::uint64_t addr = program.instructions.front().address;
    const std::size_t step_limit =
        program.instructions.size() * (secret_bits.size() + 2) + 16;
    while (true) {
        if (path.size() > step_limit)
            throw std::invalid_argument("executed path does not terminate");
        const Instruction* ins = program.find(addr);
        if (!ins) {
            // Gaps act as padding: execution slides to the next listed address.
            for (const Instruction& cand : program.instructions) {
                if (cand.address > addr) {
                    ins = &cand;
                    break;
                }
            }
            if (!ins) break;  // fell off the end of the program
            addr = ins->address;
        }
        if (ins->is_filler) {
            addr = ins->address + static_cast<std::uint64_t>(ins->length);
            continue;
        }
        if (ins->mnemonic == "ret") {
            if (include_terminal_ret) path.push_back(addr);
            break;
        }
        path.push_back(addr);
        const BranchPair* pair = nullptr;
        for (const BranchPair& bp : program.branch_pairs)
            if (bp.branch_address == addr) pair = &bp;
        if (pair) {
            if (bit_pos >= secret_bits.size())
                throw std::invalid_argument("secret bits exhausted along the path");
            int bit = secret_bits[bit_pos++];
            bool take = (bit != 0) == pair->taken_means_one;
            addr = take ? pair->taken.begin : pair->fallthrough.begin;
            continue;
        }
        addr = ins->address + static_cast<std::uint64_t>(ins->length);
    }
    return path;
}

} // namespace fetchlab::listing
