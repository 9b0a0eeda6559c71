#pragma once

// Per-process bookkeeping of pages (variables this process owns) and views
// (variables this process has attached, possibly its own). The cross-process
// source of truth is the attach count in each variable's meta segment:
//
//   attach_count = (1 while the owner has not released) + (live views anywhere)
//
// Whoever drives the count to zero unlinks both segments, so an owner may
// release while other processes still read; the bytes stay valid until the
// last view goes.

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "shmkit/matrix.hpp"
#include "shmkit/segment.hpp"

namespace shmkit {

namespace detail {
struct ViewState;
}

// A live attachment to a shared variable. Copies share one mapping; the
// mapping itself survives release_views (it is unmapped when the last copy
// is dropped), so reads through a released handle are memory-safe but no
// longer keep the variable alive.
class View {
public:
    View() = default;

    const std::string& ns() const;
    const std::string& variable() const;
    const VariableMeta& meta() const;

    ValueKind kind() const { return meta().kind(); }
    std::uint64_t nrow() const { return meta().nrow; }
    std::uint64_t ncol() const { return meta().ncol; }
    std::uint64_t size() const { return meta().element_count(); }

    std::span<const double> values() const;
    // Writes are visible to every process; overlapping concurrent writes need
    // external synchronization.
    std::span<double> mutable_values() const;

    double operator()(std::uint64_t i, std::uint64_t j) const { return values()[j * nrow() + i]; }
    std::span<const double> column(std::uint64_t j) const { return values().subspan(j * nrow(), nrow()); }

    explicit operator bool() const noexcept { return static_cast<bool>(state_); }

private:
    friend class Registry;
    explicit View(std::shared_ptr<detail::ViewState> state) : state_(std::move(state)) {}
    std::shared_ptr<detail::ViewState> state_;
};

struct PageEntry {
    std::string ns;
    std::string variable;
    VariableMeta meta;
};

struct ViewEntry {
    std::string ns;
    std::string variable;
};

class Registry {
public:
    Registry();
    ~Registry();

    Registry(const Registry&) = delete;
    Registry& operator=(const Registry&) = delete;

    // Creates one data+meta segment pair per variable and copies the payload
    // in. All-or-nothing: on failure, pairs created by this call are removed.
    std::vector<PageEntry> register_variables(std::string_view ns, const std::map<std::string, VariableRef>& vars);

    // Registers each element as "<name>.<i>" and records the element count.
    std::vector<PageEntry> register_list(std::string_view ns, std::string_view name,
                                         std::span<const VariableRef> elements);
    std::optional<std::size_t> list_length(std::string_view ns, std::string_view name) const;
    void release_list(std::string_view ns, std::string_view name);

    std::map<std::string, View> retrieve_views(std::string_view ns, const std::vector<std::string>& names);
    View retrieve_view(std::string_view ns, const std::string& name);

    // Reads dims/kind from the meta segment only.
    VariableMeta retrieve_metadata(std::string_view ns, const std::string& name) const;

    // Releases one held view per listed name (most recent first). NotHeld if
    // any name has no held view; nothing is released in that case.
    void release_views(std::string_view ns, const std::vector<std::string>& names);

    // NotOwned if any name is not a page of this registry; nothing is released
    // in that case. Destruction is deferred while views are live elsewhere.
    void release_variables(std::string_view ns, const std::vector<std::string>& names);

    std::vector<PageEntry> page_list() const;
    std::vector<ViewEntry> view_list() const;

    // Releases every view, then every page, of one namespace.
    void release_namespace(std::string_view ns);
    void release_namespace_views(std::string_view ns);

    // Releases everything; the registry stays usable.
    void shutdown();

private:
    struct Page;
    using Key = std::pair<std::string, std::string>;

    void release_page_locked(std::map<Key, std::unique_ptr<Page>>::iterator it);
    void release_view_locked(const std::shared_ptr<detail::ViewState>& state);

    mutable std::mutex mutex_;
    std::map<Key, std::unique_ptr<Page>> pages_;
    std::map<Key, std::vector<std::shared_ptr<detail::ViewState>>> views_;
    std::map<Key, std::size_t> lists_;
};

// The registry used by workers and the CLI; released at normal process exit.
Registry& process_registry();

// ---------------------------------------------------------------------------
// Host-wide inspection and crash recovery.

struct LiveVariable {
    std::string ns;
    std::string variable;
    VariableMeta meta;
    std::vector<MetaBlock::PidSlot> holders;
    std::size_t view_slots = 0;
    bool owner_present = false;
};

// Every published variable visible on this host (optionally in one namespace).
std::vector<LiveVariable> inspect_variables(std::optional<std::string_view> ns = std::nullopt);

struct SweptVariable {
    std::string ns;
    std::string variable;
    std::uint64_t attach_count = 0;
};

// Removes variables whose meta header is valid but whose recorded holders are
// all dead processes, provided every attachment is accounted for in the PID
// table. Live-held variables are never touched.
std::vector<SweptVariable> sweep_orphans(std::optional<std::string_view> ns = std::nullopt);

bool process_alive(std::uint32_t pid) noexcept;

} // namespace shmkit
