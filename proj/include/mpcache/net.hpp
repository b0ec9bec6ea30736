#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "mpcache/ring.hpp"

// Single-process simulation of three honest-majority parties connected by
// FIFO links.  Party i holds share components (i, i+1 mod 3).  All protocol
// randomness flows from one master seed, so a run is a pure function of
// (inputs, seed).  The ledger records what a real deployment would pay: one
// "round" is one global enqueue/flush cycle, ring elements cost 8 bytes,
// boolean payloads cost their bit count rounded up per message.

namespace mpcache {

// Backend for comparison/equality circuits.  Boolean runs the real shared
// GF(2) circuits; Ideal computes the same results inside the simulator with
// identical invocation and round counts but no bytes on the wire (debug aid).
enum class Backend { Boolean, Ideal };

struct PhaseCost {
    std::uint64_t rounds = 0;
    std::uint64_t bytes_sent = 0;
    std::uint64_t mul_invocations = 0;
    std::uint64_t comparison_invocations = 0;
    std::uint64_t equality_invocations = 0;
    std::uint64_t comparison_levels = 0;  // sequential comparison depth, summed over calls
    std::map<int, std::uint64_t> bit_width_hist;

    void add(const PhaseCost& o);
};

class CostLedger {
  public:
    PhaseCost& phase(const std::string& name) { return phases_[name]; }
    const std::map<std::string, PhaseCost>& phases() const { return phases_; }
    PhaseCost total() const;
    void clear() { phases_.clear(); }

  private:
    std::map<std::string, PhaseCost> phases_;
};

class PartyNet {
  public:
    explicit PartyNet(std::uint64_t master_seed, Backend backend = Backend::Boolean);

    Backend backend() const { return backend_; }
    std::uint64_t master_seed() const { return master_seed_; }

    // Messaging.  send() stages a message on the from->to link; flush()
    // delivers everything staged and advances the round counter.  A round
    // with no staged messages is a programming error.
    void send(int from, int to, std::uint64_t payload_bits);
    void flush();
    std::uint64_t total_rounds() const { return total_rounds_; }

    // Phase scoping for ledger attribution (innermost wins).
    void push_phase(const std::string& name);
    void pop_phase();
    const std::string& current_phase() const;
    CostLedger& ledger() { return ledger_; }
    const CostLedger& ledger() const { return ledger_; }
    PhaseCost& cost() { return ledger_.phase(current_phase()); }

    // Rounds charged without traffic: the Ideal backend mirrors the Boolean
    // backend's round structure so reports stay comparable.
    void charge_rounds(std::uint64_t n);

    // Randomness.  The dealer stream seeds fresh sharings; the pairwise
    // streams implement replicated zero sharing (component i of a triple is
    // r_i - r_{i-1}, so the three components always sum to zero).
    ring_t dealer_draw();
    std::array<ring_t, 3> zero_triple();
    std::array<ring_t, 3> zero_triple_xor();

    void set_transcript(std::ostream* sink) { transcript_ = sink; }

    // Fault-injection hook for the self-test's mutation check: the value is
    // added to every truncation result.
    std::int64_t trunc_fault = 0;

  private:
    std::uint64_t master_seed_;
    Backend backend_;
    CostLedger ledger_;
    std::vector<std::string> phase_stack_;
    std::uint64_t total_rounds_ = 0;

    struct Staged {
        std::string phase;
        int from;
        int to;
        std::uint64_t bytes;
    };
    std::vector<Staged> staged_;

    std::mt19937_64 dealer_rng_;
    std::array<std::mt19937_64, 3> pair_rng_;
    std::ostream* transcript_ = nullptr;
};

class PhaseScope {
  public:
    PhaseScope(PartyNet& net, const std::string& name) : net_(net) { net_.push_phase(name); }
    ~PhaseScope() { net_.pop_phase(); }
    PhaseScope(const PhaseScope&) = delete;
    PhaseScope& operator=(const PhaseScope&) = delete;

  private:
    PartyNet& net_;
};

// Stable JSON rendering of a ledger (phases sorted by name).
std::string ledger_to_json(const CostLedger& ledger, int indent = 2);

}  // namespace mpcache
