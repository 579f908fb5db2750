//! Side features: item categories and user profile buckets.
//!
//! ```text
//! #item category
//! 0    3
//!
//! #user age location
//! 0    2    5
//! ```

use std::io::Write;

use super::log::{check_header, parse_fields, parse_num};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SideInfo {
    item_category: Vec<u32>,
    user_age: Vec<u32>,
    user_location: Vec<u32>,
}

impl SideInfo {
    /// Every feature set to bucket 0.
    pub fn empty(users: usize, items: usize) -> Self {
        Self {
            item_category: vec![0; items],
            user_age: vec![0; users],
            user_location: vec![0; users],
        }
    }

    pub fn new(item_category: Vec<u32>, user_age: Vec<u32>, user_location: Vec<u32>) -> Result<Self> {
        if user_age.len() != user_location.len() {
            return Err(Error::Schema("age and location tables differ in length".into()));
        }
        Ok(Self {
            item_category,
            user_age,
            user_location,
        })
    }

    /// Fills tables of the given sizes from parsed rows; unlisted ids stay 0.
    pub fn from_rows(users: usize, items: usize, item_rows: &[(u32, u32)], user_rows: &[(u32, u32, u32)]) -> Result<Self> {
        let mut s = Self::empty(users, items);
        for &(item, cat) in item_rows {
            *s.item_category.get_mut(item as usize).ok_or(Error::Index {
                what: "item",
                index: item as usize,
                bound: items,
            })? = cat;
        }
        for &(user, age, loc) in user_rows {
            let u = user as usize;
            if u >= users {
                return Err(Error::Index {
                    what: "user",
                    index: u,
                    bound: users,
                });
            }
            s.user_age[u] = age;
            s.user_location[u] = loc;
        }
        Ok(s)
    }

    pub fn num_users(&self) -> usize {
        self.user_age.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_category.len()
    }

    pub fn category(&self, item: u32) -> u32 {
        self.item_category.get(item as usize).copied().unwrap_or(0)
    }

    pub fn age(&self, user: u32) -> u32 {
        self.user_age.get(user as usize).copied().unwrap_or(0)
    }

    pub fn location(&self, user: u32) -> u32 {
        self.user_location.get(user as usize).copied().unwrap_or(0)
    }

    pub fn categories(&self) -> &[u32] {
        &self.item_category
    }

    /// Bucket counts (`max id + 1`, at least 1) for embedding tables.
    pub fn num_categories(&self) -> usize {
        bucket_count(&self.item_category)
    }

    pub fn num_ages(&self) -> usize {
        bucket_count(&self.user_age)
    }

    pub fn num_locations(&self) -> usize {
        bucket_count(&self.user_location)
    }
}

fn bucket_count(v: &[u32]) -> usize {
    v.iter().max().map_or(1, |&m| m as usize + 1)
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.split('\n')
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

pub fn parse_item_table(text: &str) -> Result<Vec<(u32, u32)>> {
    let mut lines = data_lines(text);
    let Some((n, header)) = lines.next() else {
        return Ok(Vec::new());
    };
    check_header(n, header, &["item", "category"])?;
    lines
        .map(|(n, l)| {
            let [i, c] = parse_fields::<2>(n, l)?;
            Ok((parse_num(n, "item", i)?, parse_num(n, "category", c)?))
        })
        .collect()
}

pub fn parse_user_table(text: &str) -> Result<Vec<(u32, u32, u32)>> {
    let mut lines = data_lines(text);
    let Some((n, header)) = lines.next() else {
        return Ok(Vec::new());
    };
    check_header(n, header, &["user", "age", "location"])?;
    lines
        .map(|(n, l)| {
            let [u, a, loc] = parse_fields::<3>(n, l)?;
            Ok((
                parse_num(n, "user", u)?,
                parse_num(n, "age", a)?,
                parse_num(n, "location", loc)?,
            ))
        })
        .collect()
}

pub fn write_item_table<W: Write>(mut w: W, side: &SideInfo) -> std::io::Result<()> {
    writeln!(w, "#item category")?;
    for (i, c) in side.item_category.iter().enumerate() {
        writeln!(w, "{i}\t{c}")?;
    }
    Ok(())
}

pub fn write_user_table<W: Write>(mut w: W, side: &SideInfo) -> std::io::Result<()> {
    writeln!(w, "#user age location")?;
    for (u, (a, l)) in side.user_age.iter().zip(&side.user_location).enumerate() {
        writeln!(w, "{u}\t{a}\t{l}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tables_round_trip() {
        let side = SideInfo::new(vec![2, 0, 1], vec![4, 5], vec![0, 9]).unwrap();
        let mut items = Vec::new();
        let mut users = Vec::new();
        write_item_table(&mut items, &side).unwrap();
        write_user_table(&mut users, &side).unwrap();
        let ir = parse_item_table(std::str::from_utf8(&items).unwrap()).unwrap();
        let ur = parse_user_table(std::str::from_utf8(&users).unwrap()).unwrap();
        assert_eq!(SideInfo::from_rows(2, 3, &ir, &ur).unwrap(), side);
    }

    #[test]
    fn rejects_bad_rows() {
        assert!(parse_item_table("#item category\n1\n").is_err());
        assert!(parse_user_table("#user age\n").is_err());
        assert!(SideInfo::from_rows(1, 1, &[(5, 0)], &[]).is_err());
    }
}
