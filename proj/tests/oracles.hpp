#pragma once

#include <vector>

#include "kvec/sequence_model.hpp"

namespace kvec::testing {

// Independent oracle: value correlation by literally re-keying item i to
// j's key, appending it to that key's observed items and re-segmenting the
// result into sessions (maximal runs of equal session value).
inline bool rekey_correlated(const TangledSequence& seq, std::size_t i, std::size_t j) {
  std::vector<std::size_t> members;
  for (std::size_t p = 0; p < i; ++p)
    if (seq[p].key == seq[j].key) members.push_back(p);
  members.push_back(i);
  std::vector<int> session_of(members.size());
  int session = 0;
  for (std::size_t m = 0; m < members.size(); ++m) {
    if (m > 0 && seq.session_value(members[m]) != seq.session_value(members[m - 1])) ++session;
    session_of[m] = session;
  }
  for (std::size_t m = 0; m < members.size(); ++m)
    if (members[m] == j) return session_of[m] == session_of.back();
  return false;
}

inline DenseMask mask_by_rekeying(const TangledSequence& seq, const MaskOptions& opt) {
  const std::size_t t = seq.size();
  DenseMask m(t);
  for (std::size_t i = 0; i < t; ++i) {
    m.set(i, i, true);
    for (std::size_t j = 0; j < i; ++j) {
      if (i - j >= opt.window) continue;
      const bool same_key = seq[i].key == seq[j].key;
      const bool vis = (opt.key_correlation && same_key) ||
                       (opt.value_correlation && !same_key && rekey_correlated(seq, i, j));
      m.set(i, j, vis);
    }
  }
  return m;
}

}  // namespace kvec::testing
