#include "mpcache/net.hpp"

#include <sstream>
#include <stdexcept>

namespace mpcache {

namespace {

// splitmix64: decorrelates the per-purpose streams drawn from one master seed.
std::uint64_t splitmix(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

}  // namespace

void PhaseCost::add(const PhaseCost& o) {
    rounds += o.rounds;
    bytes_sent += o.bytes_sent;
    mul_invocations += o.mul_invocations;
    comparison_invocations += o.comparison_invocations;
    equality_invocations += o.equality_invocations;
    comparison_levels += o.comparison_levels;
    for (const auto& [w, c] : o.bit_width_hist) bit_width_hist[w] += c;
}

PhaseCost CostLedger::total() const {
    PhaseCost t;
    for (const auto& [name, cost] : phases_) t.add(cost);
    return t;
}

PartyNet::PartyNet(std::uint64_t master_seed, Backend backend)
    : master_seed_(master_seed), backend_(backend) {
    std::uint64_t s = master_seed;
    dealer_rng_.seed(splitmix(s));
    for (auto& rng : pair_rng_) rng.seed(splitmix(s));
    phase_stack_.push_back("default");
}

void PartyNet::send(int from, int to, std::uint64_t payload_bits) {
    if (from < 0 || from > 2 || to < 0 || to > 2 || from == to)
        throw std::logic_error("PartyNet::send: bad link");
    staged_.push_back({current_phase(), from, to, (payload_bits + 7) / 8});
}

void PartyNet::flush() {
    if (staged_.empty()) throw std::logic_error("PartyNet::flush: empty round");
    PhaseCost& c = cost();
    c.rounds += 1;
    total_rounds_ += 1;
    for (const Staged& m : staged_) {
        ledger_.phase(m.phase).bytes_sent += m.bytes;
        if (transcript_) {
            *transcript_ << "{\"phase\":\"" << m.phase << "\",\"round\":" << total_rounds_ << ",\"link\":\""
                         << m.from << "->" << m.to << "\",\"bytes\":" << m.bytes << "}\n";
        }
    }
    staged_.clear();
}

void PartyNet::push_phase(const std::string& name) { phase_stack_.push_back(name); }

void PartyNet::pop_phase() {
    if (phase_stack_.size() <= 1) throw std::logic_error("PartyNet::pop_phase: stack underflow");
    phase_stack_.pop_back();
}

const std::string& PartyNet::current_phase() const { return phase_stack_.back(); }

void PartyNet::charge_rounds(std::uint64_t n) {
    cost().rounds += n;
    total_rounds_ += n;
}

ring_t PartyNet::dealer_draw() { return dealer_rng_(); }

std::array<ring_t, 3> PartyNet::zero_triple() {
    const ring_t r0 = pair_rng_[0]();
    const ring_t r1 = pair_rng_[1]();
    const ring_t r2 = pair_rng_[2]();
    return {r0 - r2, r1 - r0, r2 - r1};
}

std::array<ring_t, 3> PartyNet::zero_triple_xor() {
    const ring_t r0 = pair_rng_[0]();
    const ring_t r1 = pair_rng_[1]();
    const ring_t r2 = pair_rng_[2]();
    return {r0 ^ r2, r1 ^ r0, r2 ^ r1};
}

std::string ledger_to_json(const CostLedger& ledger, int indent) {
    const std::string pad(indent, ' ');
    const std::string pad2(2 * indent, ' ');
    std::ostringstream os;
    os << "{\n";
    bool first = true;
    auto emit = [&](const std::string& name, const PhaseCost& c) {
        if (!first) os << ",\n";
        first = false;
        os << pad << "\"" << name << "\": {\n";
        os << pad2 << "\"rounds\": " << c.rounds << ",\n";
        os << pad2 << "\"bytes_sent\": " << c.bytes_sent << ",\n";
        os << pad2 << "\"mul_invocations\": " << c.mul_invocations << ",\n";
        os << pad2 << "\"comparison_invocations\": " << c.comparison_invocations << ",\n";
        os << pad2 << "\"equality_invocations\": " << c.equality_invocations << ",\n";
        os << pad2 << "\"comparison_levels\": " << c.comparison_levels << ",\n";
        os << pad2 << "\"bit_width_hist\": {";
        bool fw = true;
        for (const auto& [w, n] : c.bit_width_hist) {
            if (!fw) os << ", ";
            fw = false;
            os << "\"" << w << "\": " << n;
        }
        os << "}\n" << pad << "}";
    };
    for (const auto& [name, cost] : ledger.phases()) emit(name, cost);
    emit("total", ledger.total());
    os << "\n}";
    return os.str();
}

}  // namespace mpcache
