#pragma once

#include <cstdint>
#include <vector>

#include "mpcache/net.hpp"
#include "mpcache/nonlinear.hpp"
#include "mpcache/rss.hpp"

// Secret-index retrieval from shared tables.  A fetch never reveals which
// rows were touched: each secret id becomes a one-hot row via batched
// equality tests, and the rows are pulled out by an exact (untruncated)
// matmul against the table, so gathered values are bit-identical to the
// stored ones.  Working at block granularity divides the equality count by
// the block size and shrinks the id width, which is where the cluster-level
// savings come from.

namespace mpcache {

// [m, slots] arithmetic 0/1 matrix from m secret ids, one batched equality
// call (m*slots tests at the ids' width).
ShareTensor onehot_matrix(PartyNet& net, const std::vector<SecretIndex>& ids, std::size_t slots);

// onehot [m, C] applied to a table of C blocks of `block` rows each
// ([C*block, cols] row-major): result [m*block, cols], exact.
ShareTensor gather_by_onehot(PartyNet& net, const ShareTensor& onehot, const ShareTensor& table,
                             std::uint32_t block = 1);

// onehot_matrix + gather_by_onehot under ledger phase "gather".
ShareTensor gather_blocks(PartyNet& net, const std::vector<SecretIndex>& ids, const ShareTensor& table,
                          std::uint32_t block = 1);

// Oblivious stable compaction.  The indicator is an arithmetic 0/1 vector;
// the only value ever opened is its population count.  compaction_matrix
// row r is one-hot at the position of the (r+1)-th kept element, so
// M x table keeps rows in position order.
std::uint32_t reveal_count(PartyNet& net, const ShareTensor& indicator);
ShareTensor compaction_matrix(PartyNet& net, const ShareTensor& indicator, std::uint32_t count);

// Closed-form equality/bit counts for fetching from a table of `tokens`
// rows, token-by-token versus by clusters, with the fetch sizes given in
// the respective units.
struct GatherCounts {
    std::uint64_t fetches = 0;
    std::uint64_t slots = 0;
    int width = 0;
    std::uint64_t equality_tests = 0;  // fetches * slots
    std::uint64_t bits = 0;            // equality_tests * width
};

struct GatherCostModel {
    GatherCounts token;
    GatherCounts cluster;
    double comm_ratio = 0.0;  // token bits over cluster bits
};

GatherCostModel gather_cost_model(std::uint64_t tokens, std::uint64_t clusters, std::uint64_t token_fetches,
                                  std::uint64_t cluster_fetches);

}  // namespace mpcache
