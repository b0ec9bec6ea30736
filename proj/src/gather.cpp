#include "mpcache/gather.hpp"

#include <stdexcept>

namespace mpcache {

ShareTensor onehot_matrix(PartyNet& net, const std::vector<SecretIndex>& ids, std::size_t slots) {
    const std::size_t m = ids.size();
    const auto mu = static_cast<std::uint32_t>(m);
    const auto su = static_cast<std::uint32_t>(slots);
    if (m == 0) return ShareTensor::zeros({0, su});
    const int w = ids[0].width;
    for (const auto& id : ids) {
        if (id.width != w) throw std::invalid_argument("onehot_matrix: mixed id widths");
    }
    if ((std::uint64_t{1} << w) < slots) throw std::invalid_argument("onehot_matrix: width too small for slots");

    ShareTensor vals;
    vals.dims = {mu, su};
    for (auto& c : vals.comp) c.resize(m * slots);
    std::vector<std::uint64_t> consts(m * slots);
    for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t j = 0; j < slots; ++j) {
            for (int c = 0; c < 3; ++c) vals.comp[c][r * slots + j] = ids[r].comp[c];
            consts[r * slots + j] = j;
        }
    }
    ShareTensor out = sec_equal_consts(net, vals, consts, w);
    out.dims = {mu, su};
    return out;
}

ShareTensor gather_by_onehot(PartyNet& net, const ShareTensor& onehot, const ShareTensor& table,
                             std::uint32_t block) {
    if (onehot.dims.size() != 2 || table.dims.size() != 2) {
        throw std::invalid_argument("gather_by_onehot: need rank-2 operands");
    }
    const std::uint32_t m = onehot.dims[0];
    const std::uint32_t c = onehot.dims[1];
    const std::uint32_t rows = table.dims[0];
    const std::uint32_t cols = table.dims[1];
    if (block == 0 || rows != c * block) throw std::invalid_argument("gather_by_onehot: block layout mismatch");
    if (m == 0) return ShareTensor::zeros({0, cols});

    // a block of `block` consecutive rows is one contiguous row of the
    // reshaped table, so the whole gather is a single exact matmul
    ShareTensor view = table;
    view.dims = {c, block * cols};
    ShareTensor picked = sec_matmul(net, onehot, view, false, FxMode::Raw);
    picked.dims = {m * block, cols};
    return picked;
}

ShareTensor gather_blocks(PartyNet& net, const std::vector<SecretIndex>& ids, const ShareTensor& table,
                          std::uint32_t block) {
    PhaseScope scope(net, "gather");
    if (table.dims.size() != 2 || block == 0 || table.dims[0] % block != 0) {
        throw std::invalid_argument("gather_blocks: block layout mismatch");
    }
    ShareTensor oh = onehot_matrix(net, ids, table.dims[0] / block);
    return gather_by_onehot(net, oh, table, block);
}

std::uint32_t reveal_count(PartyNet& net, const ShareTensor& indicator) {
    ShareTensor acc = ShareTensor::zeros({1});
    for (int c = 0; c < 3; ++c) {
        ring_t s = 0;
        for (ring_t v : indicator.comp[c]) s = ring_add(s, v);
        acc.comp[c][0] = s;
    }
    std::vector<ring_t> opened = reconstruct_raws(net, acc);
    if (opened[0] > indicator.numel()) throw std::logic_error("reveal_count: indicator not 0/1");
    return static_cast<std::uint32_t>(opened[0]);
}

ShareTensor compaction_matrix(PartyNet& net, const ShareTensor& indicator, std::uint32_t count) {
    const std::size_t n = indicator.numel();
    const auto nu = static_cast<std::uint32_t>(n);
    if (count == 0) return ShareTensor::zeros({0, nu});

    // inclusive prefix sums stay local: every party adds its own components
    ShareTensor prefix = indicator;
    for (int c = 0; c < 3; ++c) {
        for (std::size_t t = 1; t < n; ++t) {
            prefix.comp[c][t] = ring_add(prefix.comp[c][t], prefix.comp[c][t - 1]);
        }
    }

    const int w = index_width(n + 1);
    ShareTensor vals;
    vals.dims = {count, nu};
    for (auto& c : vals.comp) c.resize(std::size_t{count} * n);
    std::vector<std::uint64_t> consts(std::size_t{count} * n);
    for (std::uint32_t r = 0; r < count; ++r) {
        for (std::size_t t = 0; t < n; ++t) {
            for (int c = 0; c < 3; ++c) vals.comp[c][std::size_t{r} * n + t] = prefix.comp[c][t];
            consts[std::size_t{r} * n + t] = r + 1;
        }
    }
    ShareTensor hits = sec_equal_consts(net, vals, consts, w);

    // the (r+1)-th prefix value repeats on runs of zeros; masking by the
    // indicator keeps only the position that actually holds the element
    ShareTensor mask;
    mask.dims = {count, nu};
    for (int c = 0; c < 3; ++c) {
        mask.comp[c].resize(std::size_t{count} * n);
        for (std::uint32_t r = 0; r < count; ++r) {
            for (std::size_t t = 0; t < n; ++t) {
                mask.comp[c][std::size_t{r} * n + t] = indicator.comp[c][t];
            }
        }
    }
    hits.dims = {count, nu};
    return sec_mul(net, hits, mask, FxMode::Raw);
}

GatherCostModel gather_cost_model(std::uint64_t tokens, std::uint64_t clusters, std::uint64_t token_fetches,
                                  std::uint64_t cluster_fetches) {
    GatherCostModel m;
    m.token.fetches = token_fetches;
    m.token.slots = tokens;
    m.token.width = index_width(tokens);
    m.token.equality_tests = token_fetches * tokens;
    m.token.bits = m.token.equality_tests * static_cast<std::uint64_t>(m.token.width);
    m.cluster.fetches = cluster_fetches;
    m.cluster.slots = clusters;
    m.cluster.width = index_width(clusters);
    m.cluster.equality_tests = cluster_fetches * clusters;
    m.cluster.bits = m.cluster.equality_tests * static_cast<std::uint64_t>(m.cluster.width);
    m.comm_ratio = m.cluster.bits ? double(m.token.bits) / double(m.cluster.bits) : 0.0;
    return m;
}

}  // namespace mpcache
